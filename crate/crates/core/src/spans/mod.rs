//! Entity-span construction over question + caption text.
//!
//! Spans come from one of six methods ([`SpanMethod`]): person-filtered NER,
//! NER plus noun-phrase chunking, dataset metadata string matching, and three
//! OKVQA filtering levels over raw NER output. Links to wiki titles are then
//! resolved under a [`LinkMode`].

mod ner;
mod okvqa;
mod resolver;
pub mod text;
mod types;

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbeddingTable, Namespace};
use crate::injector::entity_lookup_key;

pub use ner::{
    Gazetteer, GazetteerNer, LexiconChunker, NerProvider, NerSpan, NounChunker, LABELS, MISC,
    NOUN_CHUNK, PERSON,
};
pub use okvqa::{filter_okvqa, load_exclusion_list, OkvqaRules};
#[cfg(feature = "wikipedia")]
pub use resolver::WikipediaResolver;
pub use resolver::{
    CacheRecord, CachedResolver, LinkResolver, RateLimiter, ResolverError, StubResolver,
    RATE_LIMIT_ENV,
};
pub use types::{
    Answer, EntitySpan, Link, LinkMode, LinkStatus, MetaEntity, OkvqaLevel, QuestionRecord,
    SpanEntry, SpanMethod, SpanSet, SpanStats, TextField,
};

use text::{char_len, char_slice, find_word_matches};

/// Separator placed between prepended metadata names and the caption.
pub const META_SEPARATOR: &str = "; ";

/// NER labels kept by [`SpanMethod::NerPer`].
pub const PERSON_LABELS: &[&str] = &[PERSON];

/// Label given to metadata matches.
pub const META_LABEL: &str = "META";

#[derive(Debug, Error)]
pub enum SpanError {
    #[error("empty question")]
    EmptyQuestion,
    #[error("manual list required")]
    ManualListRequired,
    #[error("num_records must be positive")]
    NoRecords,
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("span set line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Question, one space, then the caption when present.
pub fn compose_text(record: &QuestionRecord) -> Result<String, SpanError> {
    compose(&record.question, record.caption.as_deref())
}

fn compose(question: &str, caption: Option<&str>) -> Result<String, SpanError> {
    if question.is_empty() {
        return Err(SpanError::EmptyQuestion);
    }
    Ok(match caption {
        Some(c) if !c.is_empty() => format!("{question} {c}"),
        _ => question.to_string(),
    })
}

/// NER tagger plus noun-phrase chunker.
pub struct Taggers {
    pub ner: Box<dyn NerProvider>,
    pub chunker: Box<dyn NounChunker>,
}

impl Taggers {
    pub fn new(ner: impl NerProvider + 'static, chunker: impl NounChunker + 'static) -> Self {
        Self {
            ner: Box::new(ner),
            chunker: Box::new(chunker),
        }
    }
}

impl Default for Taggers {
    fn default() -> Self {
        Self::new(GazetteerNer::default(), LexiconChunker::default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub composed_text: String,
    pub spans: Vec<EntitySpan>,
}

/// Longest span wins, ties go to the earlier start and then to the earlier
/// candidate. The result is sorted by start.
pub fn resolve_overlaps(candidates: Vec<EntitySpan>) -> Vec<EntitySpan> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&candidates[a], &candidates[b]);
        sb.len()
            .cmp(&sa.len())
            .then(sa.char_start.cmp(&sb.char_start))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<EntitySpan> = Vec::new();
    for idx in order {
        let cand = &candidates[idx];
        if cand.is_empty() || kept.iter().any(|k| k.overlaps(cand)) {
            continue;
        }
        kept.push(cand.clone());
    }
    kept.sort_by_key(|s| (s.char_start, s.char_end));
    kept
}

fn to_entity_spans(text: &str, question_len: usize, tagged: Vec<NerSpan>) -> Vec<EntitySpan> {
    tagged
        .into_iter()
        .filter_map(|t| {
            let field = if t.char_end <= question_len {
                TextField::Question
            } else if t.char_start > question_len {
                TextField::Caption
            } else {
                // crosses the question/caption boundary
                return None;
            };
            Some(EntitySpan {
                surface: char_slice(text, t.char_start, t.char_end),
                field,
                char_start: t.char_start,
                char_end: t.char_end,
                ner_label: t.label,
                link: Link::unlinked(),
            })
        })
        .collect()
}

fn meta_spans(record: &QuestionRecord) -> Result<Extraction, SpanError> {
    let question_chars: Vec<char> = record.question.chars().collect();
    let mut spans = Vec::new();
    let mut absent: Vec<&crate::spans::MetaEntity> = Vec::new();
    for entity in &record.meta_entities {
        let hits = find_word_matches(&question_chars, &entity.name);
        if hits.is_empty() {
            if !absent.iter().any(|a| a.name == entity.name) && !entity.name.is_empty() {
                absent.push(entity);
            }
            continue;
        }
        for (start, end) in hits {
            spans.push(EntitySpan {
                surface: entity.name.clone(),
                field: TextField::Question,
                char_start: start,
                char_end: end,
                ner_label: META_LABEL.to_string(),
                link: Link {
                    status: LinkStatus::Unlinked,
                    wiki_title: entity.wiki_title.clone(),
                },
            });
        }
    }

    let caption = if absent.is_empty() {
        record.caption.clone()
    } else {
        let mut prefix = absent
            .iter()
            .map(|a| a.name.as_str())
            .collect::<Vec<_>>()
            .join(META_SEPARATOR);
        if let Some(c) = record.caption.as_deref().filter(|c| !c.is_empty()) {
            prefix.push_str(META_SEPARATOR);
            prefix.push_str(c);
        }
        Some(prefix)
    };
    let composed_text = compose(&record.question, caption.as_deref())?;

    // prepended names sit at known offsets at the head of the caption
    let mut offset = question_chars.len() + 1;
    for entity in absent {
        let len = char_len(&entity.name);
        spans.push(EntitySpan {
            surface: entity.name.clone(),
            field: TextField::Caption,
            char_start: offset,
            char_end: offset + len,
            ner_label: META_LABEL.to_string(),
            link: Link {
                status: LinkStatus::Unlinked,
                wiki_title: entity.wiki_title.clone(),
            },
        });
        offset += len + char_len(META_SEPARATOR);
    }
    Ok(Extraction {
        composed_text,
        spans: resolve_overlaps(spans),
    })
}

/// Detects spans with one method. The `ok*` methods return the raw,
/// unfiltered NER spans; apply [`filter_okvqa`] afterwards.
pub fn extract_spans(
    record: &QuestionRecord,
    method: SpanMethod,
    taggers: &Taggers,
) -> Result<Extraction, SpanError> {
    if method == SpanMethod::Meta {
        return meta_spans(record);
    }
    let composed_text = compose_text(record)?;
    let question_len = char_len(&record.question);
    let ner = to_entity_spans(
        &composed_text,
        question_len,
        taggers.ner.tag(&composed_text),
    );
    let spans = match method {
        SpanMethod::NerPer => ner
            .into_iter()
            .filter(|s| PERSON_LABELS.contains(&s.ner_label.as_str()))
            .collect(),
        SpanMethod::NerAgro => {
            let mut all = ner;
            all.extend(to_entity_spans(
                &composed_text,
                question_len,
                taggers.chunker.chunk(&composed_text),
            ));
            all
        }
        SpanMethod::Ok13k | SpanMethod::Ok4k | SpanMethod::Ok2_5k => ner,
        SpanMethod::Meta => unreachable!(),
    };
    Ok(Extraction {
        composed_text,
        spans: resolve_overlaps(spans),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkOutcome {
    pub spans: Vec<EntitySpan>,
    pub transport_failures: usize,
}

fn verify(span: &EntitySpan, entity_table: &EmbeddingTable) -> Option<EntitySpan> {
    let title = match &span.link.wiki_title {
        Some(t) => t.clone(),
        None => {
            let key = entity_lookup_key(&span.surface);
            if !entity_table.contains(Namespace::Entity, &key) {
                return None;
            }
            key
        }
    };
    let mut out = span.clone();
    out.link = Link {
        status: LinkStatus::Verified,
        wiki_title: Some(title),
    };
    Some(out)
}

/// Applies a link mode. `Links` keeps spans that already carry a title or
/// whose titlecased surface is an entity key; `Noisy` also searches for the
/// rest and keeps everything. Resolver transport failures leave the span
/// unlinked and are counted, never propagated.
pub fn resolve_links(
    spans: &[EntitySpan],
    mode: LinkMode,
    resolver: &dyn LinkResolver,
    entity_table: &EmbeddingTable,
) -> LinkOutcome {
    let mut failures = 0;
    let spans = match mode {
        LinkMode::AsIs => spans.to_vec(),
        LinkMode::Links => spans
            .iter()
            .filter_map(|s| verify(s, entity_table))
            .collect(),
        LinkMode::Noisy => spans
            .iter()
            .map(|s| {
                if let Some(v) = verify(s, entity_table) {
                    return v;
                }
                match resolver.search(&s.surface) {
                    Ok(Some(title)) => {
                        let mut out = s.clone();
                        out.link = Link {
                            status: LinkStatus::Searched,
                            wiki_title: Some(title),
                        };
                        out
                    }
                    Ok(None) => s.clone(),
                    Err(e) => {
                        log::warn!("link search for `{}` failed: {e}", s.surface);
                        failures += 1;
                        s.clone()
                    }
                }
            })
            .collect(),
    };
    LinkOutcome {
        spans,
        transport_failures: failures,
    }
}

/// Whether a span can be injected: its wiki title or titlecased surface is
/// an entity key.
pub fn is_resolvable(span: &EntitySpan, entity_table: &EmbeddingTable) -> bool {
    span.link
        .wiki_title
        .as_deref()
        .is_some_and(|t| entity_table.contains(Namespace::Entity, t))
        || entity_table.contains(Namespace::Entity, &entity_lookup_key(&span.surface))
}

/// Spans per record, injectable spans per record, and the fraction of
/// records with at least one injectable span.
pub fn compute_span_stats(
    spanset: &SpanSet,
    entity_table: &EmbeddingTable,
    num_records: usize,
) -> Result<SpanStats, SpanError> {
    if num_records == 0 {
        return Err(SpanError::NoRecords);
    }
    let mut total = 0usize;
    let mut resolvable = 0usize;
    let mut with_any = 0usize;
    for entry in spanset.entries.values() {
        total += entry.spans.len();
        let r = entry
            .spans
            .iter()
            .filter(|s| is_resolvable(s, entity_table))
            .count();
        resolvable += r;
        if r > 0 {
            with_any += 1;
        }
    }
    let n = num_records as f64;
    Ok(SpanStats {
        ents_per_q: total as f64 / n,
        eberts_per_q: resolvable as f64 / n,
        frac_q_with_eberts: with_any as f64 / n,
    })
}

/// Everything needed to build a [`SpanSet`].
pub struct SpanContext<'a> {
    pub taggers: &'a Taggers,
    pub resolver: &'a dyn LinkResolver,
    pub entity_table: &'a EmbeddingTable,
    pub okvqa_rules: &'a OkvqaRules,
    pub exclusions: Option<&'a HashSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanBuild {
    pub spanset: SpanSet,
    pub transport_failures: usize,
}

/// Extraction, OKVQA filtering and link resolution for every record, in
/// parallel across records; the output keeps dataset order.
pub fn build_spanset(
    records: &[QuestionRecord],
    method: SpanMethod,
    link_mode: LinkMode,
    ctx: &SpanContext<'_>,
) -> Result<SpanBuild, SpanError> {
    if method == SpanMethod::Ok2_5k && ctx.exclusions.is_none() {
        return Err(SpanError::ManualListRequired);
    }
    let per_record: Vec<(String, SpanEntry, usize)> = records
        .par_iter()
        .map(|record| {
            let extraction = extract_spans(record, method, ctx.taggers)?;
            let spans = match method.okvqa_level() {
                Some(level) => {
                    filter_okvqa(&extraction.spans, level, ctx.okvqa_rules, ctx.exclusions)?
                }
                None => extraction.spans,
            };
            let outcome = resolve_links(&spans, link_mode, ctx.resolver, ctx.entity_table);
            Ok((
                record.id.clone(),
                SpanEntry {
                    composed_text: extraction.composed_text,
                    spans: outcome.spans,
                },
                outcome.transport_failures,
            ))
        })
        .collect::<Result<_, SpanError>>()?;

    let mut spanset = SpanSet::new(method, link_mode);
    let mut failures = 0;
    for (id, entry, f) in per_record {
        failures += f;
        spanset.entries.insert(id, entry);
    }
    Ok(SpanBuild {
        spanset,
        transport_failures: failures,
    })
}

#[derive(Serialize, Deserialize)]
struct SpanSetLine {
    record_id: String,
    method: SpanMethod,
    link_mode: LinkMode,
    spans: Vec<EntitySpan>,
    composed_text: String,
}

/// One JSON object per record, in span-set order.
pub fn write_spanset<W: Write>(spanset: &SpanSet, out: &mut W) -> Result<(), SpanError> {
    for (id, entry) in &spanset.entries {
        let line = SpanSetLine {
            record_id: id.clone(),
            method: spanset.method,
            link_mode: spanset.link_mode,
            spans: entry.spans.clone(),
            composed_text: entry.composed_text.clone(),
        };
        serde_json::to_writer(&mut *out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_spanset<R: BufRead>(reader: R) -> Result<SpanSet, SpanError> {
    let mut set: Option<SpanSet> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SpanSetLine = serde_json::from_str(&line).map_err(|e| SpanError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let set = set.get_or_insert_with(|| SpanSet::new(parsed.method, parsed.link_mode));
        if set.method != parsed.method || set.link_mode != parsed.link_mode {
            return Err(SpanError::Parse {
                line: i + 1,
                message: "mixed methods or link modes".to_string(),
            });
        }
        for s in &parsed.spans {
            if s.char_start >= s.char_end
                || char_slice(&parsed.composed_text, s.char_start, s.char_end) != s.surface
            {
                return Err(SpanError::Parse {
                    line: i + 1,
                    message: format!("span `{}` does not match the composed text", s.surface),
                });
            }
        }
        set.entries.insert(
            parsed.record_id,
            SpanEntry {
                composed_text: parsed.composed_text,
                spans: parsed.spans,
            },
        );
    }
    set.ok_or(SpanError::Parse {
        line: 0,
        message: "empty span set".to_string(),
    })
}
