//! Randomized inject calls and structural checks on their output.

use kbvqa_core::embeddings::{AlignmentMap, EmbeddingTable, FitInfo, Namespace};
use kbvqa_core::injector::*;
use kbvqa_core::spans::{EntitySpan, Link, LinkStatus, TextField};
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub text: String,
    pub spans: Vec<EntitySpan>,
    pub alignment: AlignmentMap,
    pub wiki: EmbeddingTable,
    pub wordpieces: EmbeddingTable,
    pub max_len: usize,
}

fn vec_of(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=6);
    (0..len)
        .map(|_| *b"abcdefg".choose(rng).unwrap() as char)
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = rng.random_range(1..=6);
    let ds = rng.random_range(1..=6);

    let mut wordpieces = EmbeddingTable::new(dt, false).unwrap();
    for special in [START_TOKEN, END_TOKEN, UNKNOWN_TOKEN] {
        wordpieces
            .insert(Namespace::Wordpiece, special, vec_of(&mut rng, dt))
            .unwrap();
    }
    if rng.random_bool(0.8) {
        wordpieces
            .insert(Namespace::Wordpiece, SEPARATOR_TOKEN, vec_of(&mut rng, dt))
            .unwrap();
    }
    // single letters (sometimes one is missing, which yields [UNK] words)
    let missing = if rng.random_bool(0.3) {
        Some(*b"abcdefg".choose(&mut rng).unwrap() as char)
    } else {
        None
    };
    for ch in "abcdefg".chars().filter(|c| Some(*c) != missing) {
        wordpieces
            .insert(Namespace::Wordpiece, ch.to_string(), vec_of(&mut rng, dt))
            .unwrap();
        wordpieces
            .insert(
                Namespace::Wordpiece,
                format!("##{ch}"),
                vec_of(&mut rng, dt),
            )
            .unwrap();
    }
    for _ in 0..rng.random_range(0..12) {
        let w = random_word(&mut rng);
        let key = if rng.random_bool(0.5) {
            w
        } else {
            format!("##{w}")
        };
        if !wordpieces.contains(Namespace::Wordpiece, &key) {
            wordpieces
                .insert(Namespace::Wordpiece, key, vec_of(&mut rng, dt))
                .unwrap();
        }
    }

    let n_words = rng.random_range(0..14);
    let words: Vec<String> = (0..n_words)
        .map(|_| {
            let w = random_word(&mut rng);
            if rng.random_bool(0.3) {
                capitalize(&w)
            } else {
                w
            }
        })
        .collect();
    let text = words.join(" ");

    // word-aligned, non-overlapping spans of one to three words
    let mut wiki = EmbeddingTable::new(ds, true).unwrap();
    let mut spans = Vec::new();
    let mut starts = Vec::with_capacity(words.len());
    let mut pos = 0;
    for w in &words {
        starts.push(pos);
        pos += w.chars().count() + 1;
    }
    let mut i = 0;
    while i < words.len() {
        if rng.random_bool(0.35) {
            let j = (i + rng.random_range(1..=3)).min(words.len());
            let start = starts[i];
            let end = starts[j - 1] + words[j - 1].chars().count();
            let surface = words[i..j].join(" ");
            let titled = entity_lookup_key(&surface);
            let mut link = Link::unlinked();
            match rng.random_range(0..4) {
                // resolvable through the wiki title
                0 => {
                    let title = format!("Title {seed} {}", spans.len());
                    if !wiki.contains(Namespace::Entity, &title) {
                        wiki.insert(Namespace::Entity, title.clone(), vec_of(&mut rng, ds))
                            .unwrap();
                    }
                    link = Link {
                        status: LinkStatus::Verified,
                        wiki_title: Some(title),
                    };
                }
                // resolvable through the titlecased surface, with a dangling title
                1 => {
                    if !wiki.contains(Namespace::Entity, &titled) {
                        wiki.insert(Namespace::Entity, titled.clone(), vec_of(&mut rng, ds))
                            .unwrap();
                    }
                    if rng.random_bool(0.5) {
                        link = Link {
                            status: LinkStatus::Searched,
                            wiki_title: Some("Not In Table".into()),
                        };
                    }
                }
                // both title and surface resolvable: the title must win
                2 => {
                    if !wiki.contains(Namespace::Entity, &titled) {
                        wiki.insert(Namespace::Entity, titled.clone(), vec_of(&mut rng, ds))
                            .unwrap();
                    }
                    let title = format!("Other {seed} {}", spans.len());
                    wiki.insert(Namespace::Entity, title.clone(), vec_of(&mut rng, ds))
                        .unwrap();
                    link = Link {
                        status: LinkStatus::Verified,
                        wiki_title: Some(title),
                    };
                }
                // a miss
                _ => {}
            }
            spans.push(EntitySpan {
                surface,
                field: TextField::Question,
                char_start: start,
                char_end: end,
                ner_label: "X".into(),
                link,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    // some tables never see an entity
    if wiki.is_empty() {
        wiki.insert(Namespace::Entity, "Unused", vec_of(&mut rng, ds))
            .unwrap();
    }
    let matrix = Array2::from_shape_simple_fn((dt, ds), || rng.random_range(-1.5..1.5));
    let alignment = AlignmentMap::new(
        matrix,
        FitInfo {
            num_shared_keys: 0,
            sum_squared_residual: 0.0,
            effective_rank: None,
        },
    );
    let max_len = if rng.random_bool(0.3) {
        rng.random_range(2..10)
    } else {
        64
    };
    Case {
        text,
        spans,
        alignment,
        wiki,
        wordpieces,
        max_len,
    }
}

/// Independent `W v`, accumulated left to right.
fn mat_vec(m: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| {
            let mut acc = 0.0;
            for (c, x) in v.iter().enumerate() {
                acc += m[(r, c)] * x;
            }
            acc
        })
        .collect()
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn expected_key(span: &EntitySpan, wiki: &EmbeddingTable) -> Option<String> {
    if let Some(t) = &span.link.wiki_title {
        if wiki.contains(Namespace::Entity, t) {
            return Some(t.clone());
        }
    }
    let k = entity_lookup_key(&span.surface);
    wiki.contains(Namespace::Entity, &k).then_some(k)
}

pub fn check_case(case: &Case) -> Result<(), String> {
    let seq = inject(
        &case.text,
        &case.spans,
        &case.alignment,
        &case.wiki,
        &case.wordpieces,
        case.max_len,
    )
    .map_err(|e| format!("inject failed: {e}"))?;
    let base =
        tokenize_baseline(&case.text, &case.wordpieces, case.max_len).map_err(|e| e.to_string())?;
    let row = |key: &str| case.wordpieces.get(Namespace::Wordpiece, key).unwrap();
    let toks = &seq.tokens;

    // framing
    if toks.len() < 2 || toks.len() > case.max_len {
        return Err(format!(
            "length {} with max_len {}",
            toks.len(),
            case.max_len
        ));
    }
    let (first, last) = (&toks[0], &toks[toks.len() - 1]);
    if first.text != START_TOKEN
        || first.kind != TokenKind::Special
        || !same_bits(&first.embedding, row(START_TOKEN))
    {
        return Err("bad start token".into());
    }
    if last.text != END_TOKEN
        || last.kind != TokenKind::Special
        || !same_bits(&last.embedding, row(END_TOKEN))
    {
        return Err("bad end token".into());
    }

    // ENTITY -> SEPARATOR -> WORDPIECE+ groups
    let mut i = 1;
    let mut groups = Vec::new();
    while i < toks.len() - 1 {
        let t = &toks[i];
        match t.kind {
            TokenKind::Special => return Err(format!("special token inside at {i}")),
            TokenKind::Separator => return Err(format!("separator without entity at {i}")),
            TokenKind::Wordpiece => {
                if t.span_ref.is_some() {
                    return Err(format!("stray group wordpiece at {i}"));
                }
                i += 1;
            }
            TokenKind::Entity => {
                let r = t.span_ref.ok_or("entity without span_ref")?;
                let sep = &toks[i + 1];
                if sep.kind != TokenKind::Separator
                    || sep.span_ref != Some(r)
                    || sep.text != SEPARATOR_TOKEN
                {
                    return Err(format!("entity at {i} not followed by separator"));
                }
                let sep_row = case
                    .wordpieces
                    .get(Namespace::Wordpiece, SEPARATOR_TOKEN)
                    .unwrap_or(row(UNKNOWN_TOKEN));
                if !same_bits(&sep.embedding, sep_row) {
                    return Err("separator embedding is not the table row".into());
                }
                let mut j = i + 2;
                while toks[j].kind == TokenKind::Wordpiece && toks[j].span_ref == Some(r) {
                    j += 1;
                }
                if j == i + 2 {
                    return Err(format!("group at {i} has no wordpieces"));
                }
                groups.push((i, r, j));
                i = j;
            }
        }
    }
    if groups.len() != seq.injected {
        return Err(format!(
            "{} groups but injected = {}",
            groups.len(),
            seq.injected
        ));
    }
    let refs: Vec<usize> = groups.iter().map(|g| g.1).collect();
    if refs.windows(2).any(|w| w[0] >= w[1]) {
        return Err("groups out of span order".into());
    }

    // provenance
    for &(at, r, end) in &groups {
        let span = &case.spans[r];
        let key = expected_key(span, &case.wiki).ok_or("group for an unresolvable span")?;
        let t = &toks[at];
        if t.text != key {
            return Err(format!("entity key {} expected {key}", t.text));
        }
        let source = case.wiki.get(Namespace::Entity, &key).unwrap();
        let want = mat_vec(case.alignment.matrix(), source);
        if !same_bits(&t.embedding, &want) {
            return Err(format!("entity embedding for {key} is not W·e"));
        }
        let via_api = case.alignment.map_entity(source).unwrap();
        if !same_bits(&t.embedding, &via_api) {
            return Err("entity embedding differs from map_entity".into());
        }
        let surface_pieces =
            tokenize_baseline(&span.surface, &case.wordpieces, usize::MAX).unwrap();
        let inner: Vec<&str> = surface_pieces.tokens[1..surface_pieces.len() - 1]
            .iter()
            .map(|t| t.text.as_str())
            .collect();
        let got: Vec<&str> = toks[at + 2..end].iter().map(|t| t.text.as_str()).collect();
        if inner != got {
            return Err(format!("group wordpieces {got:?} expected {inner:?}"));
        }
    }
    for t in toks.iter().filter(|t| t.kind == TokenKind::Wordpiece) {
        if !same_bits(&t.embedding, row(&t.text)) {
            return Err(format!(
                "wordpiece {} embedding is not its table row",
                t.text
            ));
        }
    }

    // resolvable spans are either injected or cut off by truncation
    let resolvable = case
        .spans
        .iter()
        .filter(|s| expected_key(s, &case.wiki).is_some())
        .count();
    if seq.lookup_misses != case.spans.len() - resolvable {
        return Err(format!(
            "lookup_misses {} expected {}",
            seq.lookup_misses,
            case.spans.len() - resolvable
        ));
    }
    if !seq.truncated && seq.injected != resolvable {
        return Err(format!(
            "untruncated but injected {} of {resolvable}",
            seq.injected
        ));
    }

    // without groups' entity and separator tokens, an untruncated sequence is the baseline
    if !seq.truncated && !base.truncated {
        let stripped: Vec<(&str, &[f64])> = toks
            .iter()
            .filter(|t| !matches!(t.kind, TokenKind::Entity | TokenKind::Separator))
            .map(|t| (t.text.as_str(), t.embedding.as_slice()))
            .collect();
        let plain: Vec<(&str, &[f64])> = base
            .tokens
            .iter()
            .map(|t| (t.text.as_str(), t.embedding.as_slice()))
            .collect();
        if stripped != plain {
            return Err("stripped sequence differs from baseline".into());
        }
    }

    // empty spans and all-miss spans both reduce to the baseline
    let empty = inject(
        &case.text,
        &[],
        &case.alignment,
        &case.wiki,
        &case.wordpieces,
        case.max_len,
    )
    .map_err(|e| e.to_string())?;
    if empty != base {
        return Err("inject with no spans differs from baseline".into());
    }
    let misses: Vec<EntitySpan> = case
        .spans
        .iter()
        .filter(|s| expected_key(s, &case.wiki).is_none())
        .cloned()
        .collect();
    let only_misses = inject(
        &case.text,
        &misses,
        &case.alignment,
        &case.wiki,
        &case.wordpieces,
        case.max_len,
    )
    .map_err(|e| e.to_string())?;
    if only_misses.tokens != base.tokens || only_misses.lookup_misses != misses.len() {
        return Err("inject with only unresolvable spans differs from baseline".into());
    }
    Ok(())
}

pub struct InjectionSummary {
    pub calls: usize,
    pub groups: usize,
    pub truncated: usize,
}

/// Runs `n` random cases; each case makes three inject calls.
pub fn check_random_injections(n: usize, seed: u64) -> Result<InjectionSummary, String> {
    let mut summary = InjectionSummary {
        calls: 0,
        groups: 0,
        truncated: 0,
    };
    for k in 0..n as u64 {
        let case = random_case(seed.wrapping_mul(1_000_003).wrapping_add(k));
        check_case(&case).map_err(|e| format!("case {k}: {e} (text {:?})", case.text))?;
        let seq = inject(
            &case.text,
            &case.spans,
            &case.alignment,
            &case.wiki,
            &case.wordpieces,
            case.max_len,
        )
        .unwrap();
        summary.calls += 3;
        summary.groups += seq.injected;
        summary.truncated += seq.truncated as usize;
    }
    Ok(summary)
}
