//! The 50-record span fixture and its golden files. Set `KBVQA_BLESS=1` to
//! rewrite the goldens after an intended change, then review the diff by
//! hand.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kbvqa_core::embeddings::{EmbeddingTable, NamespacePolicy};
use kbvqa_core::harness::load_dataset;
use kbvqa_core::spans::*;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/spans")
        .join(name)
}

pub struct Fixture {
    pub records: Vec<QuestionRecord>,
    pub taggers: Taggers,
    pub resolver: StubResolver,
    pub table: EmbeddingTable,
    pub exclusions: HashSet<String>,
}

pub fn load() -> Fixture {
    Fixture {
        records: load_dataset(fixture("records.jsonl")).unwrap(),
        taggers: Taggers::new(
            GazetteerNer::new(Gazetteer::load(fixture("gazetteer.tsv")).unwrap()),
            LexiconChunker::default(),
        ),
        resolver: StubResolver::load(fixture("resolver.jsonl"))
            .unwrap()
            .with_failure("Jordan Peele"),
        table: EmbeddingTable::load(fixture("entities.txt"), NamespacePolicy::words()).unwrap(),
        exclusions: load_exclusion_list(fixture("exclusions.txt")).unwrap(),
    }
}

pub fn build(f: &Fixture, method: SpanMethod, mode: LinkMode) -> SpanBuild {
    let rules = OkvqaRules::default();
    let ctx = SpanContext {
        taggers: &f.taggers,
        resolver: &f.resolver,
        entity_table: &f.table,
        okvqa_rules: &rules,
        exclusions: Some(&f.exclusions),
    };
    build_spanset(&f.records, method, mode, &ctx).unwrap()
}

fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = fixture("golden").join(name);
    if std::env::var_os("KBVQA_BLESS").is_some() {
        fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected != actual {
        return Err(format!("{name} differs from golden file"));
    }
    Ok(())
}

pub fn keys(set: &SpanSet, id: &str) -> Vec<(usize, usize, String)> {
    set.spans(id)
        .iter()
        .map(|s| (s.char_start, s.char_end, s.surface.clone()))
        .collect()
}

/// Every method and link mode against its golden spanset, the statistics
/// table, and the subset relations between link modes and OK-VQA filters.
pub fn check_span_goldens() -> Result<String, String> {
    let f = load();
    if f.records.len() != 50 {
        return Err(format!("fixture has {} records", f.records.len()));
    }
    let mut stats = String::from(
        "method\tlink_mode\tents_per_q\teberts_per_q\tfrac_q_with_eberts\ttransport_failures\n",
    );
    let mut files = 0;
    for &method in SpanMethod::ALL {
        for &mode in LinkMode::ALL {
            let b = build(&f, method, mode);
            let mut buf = Vec::new();
            write_spanset(&b.spanset, &mut buf).map_err(|e| e.to_string())?;
            check_golden(
                &format!("{method}_{mode}.jsonl"),
                std::str::from_utf8(&buf).unwrap(),
            )?;
            files += 1;
            let s = compute_span_stats(&b.spanset, &f.table, f.records.len())
                .map_err(|e| e.to_string())?;
            let _ = writeln!(
                stats,
                "{method}\t{mode}\t{}\t{}\t{}\t{}",
                s.ents_per_q, s.eberts_per_q, s.frac_q_with_eberts, b.transport_failures
            );
        }
    }
    check_golden("stats.tsv", &stats)?;

    for &method in SpanMethod::ALL {
        let as_is = build(&f, method, LinkMode::AsIs).spanset;
        let links = build(&f, method, LinkMode::Links).spanset;
        let noisy = build(&f, method, LinkMode::Noisy).spanset;
        for r in &f.records {
            let all = keys(&as_is, &r.id);
            if !keys(&links, &r.id).iter().all(|k| all.contains(k)) {
                return Err(format!("{method} {}: LINKS not a subset of AS_IS", r.id));
            }
            if keys(&noisy, &r.id) != all {
                return Err(format!("{method} {}: NOISY spans differ from AS_IS", r.id));
            }
        }
    }
    for &mode in LinkMode::ALL {
        let ok13 = build(&f, SpanMethod::Ok13k, mode).spanset;
        let ok4 = build(&f, SpanMethod::Ok4k, mode).spanset;
        let ok25 = build(&f, SpanMethod::Ok2_5k, mode).spanset;
        for r in &f.records {
            let (a, b, c) = (keys(&ok13, &r.id), keys(&ok4, &r.id), keys(&ok25, &r.id));
            if !b.iter().all(|k| a.contains(k)) || !c.iter().all(|k| b.contains(k)) {
                return Err(format!("{mode} {}: OK filter levels not nested", r.id));
            }
        }
    }
    Ok(format!(
        "{files} spansets and stats table match, subset relations hold"
    ))
}
