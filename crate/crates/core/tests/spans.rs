//! Span sets and span statistics on a fixed 50-record corpus, pinned to
//! golden files.

mod common;

use common::span_fixture::{build, check_span_goldens, load};
use kbvqa_core::spans::*;

#[test]
fn spansets_stats_and_subsets_match_golden_files() {
    check_span_goldens().unwrap();
}

#[test]
fn hand_counted_meta_statistics() {
    // META spans: one per metadata name, found in the question or prepended
    // to the caption. 25 records carry 31 names. Michelle Obama, Sundar
    // Pichai, Cristiano Ronaldo (twice each) and Jordan Peele are not in the
    // entity table, leaving 24 resolvable spans over 21 records.
    let f = load();
    let b = build(&f, SpanMethod::Meta, LinkMode::AsIs);
    let s = compute_span_stats(&b.spanset, &f.table, 50).unwrap();
    assert_eq!(b.spanset.total_spans(), 31);
    assert_eq!(s.ents_per_q, 31.0 / 50.0);
    assert_eq!(s.eberts_per_q, 24.0 / 50.0);
    assert_eq!(s.frac_q_with_eberts, 21.0 / 50.0);
    // an absent name moves into the composed caption
    assert_eq!(
        b.spanset.composed_text("fx00").unwrap(),
        "Who is to the left of Barack Obama?"
    );
    assert_eq!(
        b.spanset.composed_text("fx03").unwrap(),
        "Who is the person in the picture? Lionel Messi"
    );
}

#[test]
fn noisy_mode_counts_the_failed_search() {
    let f = load();
    let b = build(&f, SpanMethod::NerPer, LinkMode::Noisy);
    assert_eq!(b.transport_failures, 1);
    let peele = b.spanset.spans("fx15");
    assert_eq!(peele.len(), 1);
    assert_eq!(peele[0].surface, "Jordan Peele");
    assert_eq!(peele[0].link, Link::unlinked());
}
