//! Turns composed text plus resolved spans into an embedding-level input
//! sequence.
//!
//! Each injectable span becomes `[ENTITY, "/", wordpieces(surface)...]`,
//! where the ENTITY embedding is the aligned entity vector. Everything else
//! is plain greedy longest-match wordpiece segmentation.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{
    AlignmentMap, EmbeddingError, EmbeddingTable, Namespace, CONTINUATION_PREFIX,
};
use crate::spans::EntitySpan;

pub const START_TOKEN: &str = "[CLS]";
pub const END_TOKEN: &str = "[SEP]";
pub const UNKNOWN_TOKEN: &str = "[UNK]";
pub const SEPARATOR_TOKEN: &str = "/";

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("wordpiece table is missing special token `{0}`")]
    MissingSpecial(&'static str),
    #[error("max_len must be at least 2, got {0}")]
    MaxLenTooSmall(usize),
    #[error("alignment maps {map_source}->{map_target} but tables have dims {wiki}->{wordpiece}")]
    DimensionMismatch {
        map_source: usize,
        map_target: usize,
        wiki: usize,
        wordpiece: usize,
    },
    #[error("span {index} is out of range or overlaps its predecessor")]
    BadSpan { index: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    Special,
    Wordpiece,
    Separator,
    Entity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    pub embedding: Vec<f64>,
    pub span_ref: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectedSequence {
    pub tokens: Vec<Token>,
    pub truncated: bool,
    pub max_len: usize,
    /// ENTITY tokens emitted.
    pub injected: usize,
    /// Spans whose title and titlecased surface both missed the entity table.
    pub lookup_misses: usize,
}

impl InjectedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.first().map(|t| t.embedding.len()).unwrap_or(0)
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        self.tokens.iter().map(|t| t.kind).collect()
    }
}

/// Uppercase initial, lowercase remainder, for every whitespace-separated
/// word. Whitespace is kept as is.
pub fn entity_lookup_key(surface: &str) -> String {
    let mut out = String::with_capacity(surface.len());
    let mut at_word_start = true;
    for c in surface.chars() {
        if c.is_whitespace() {
            at_word_start = true;
            out.push(c);
        } else if at_word_start {
            out.extend(c.to_uppercase());
            at_word_start = false;
        } else {
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Whitespace and punctuation splitting, lowercased for uncased tables.
fn basic_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let text = if lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace()) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match wordpiece segmentation over the WORDPIECE namespace
/// of an embedding table.
pub struct WordpieceTokenizer<'a> {
    table: &'a EmbeddingTable,
    unknown: &'a [f64],
    start: &'a [f64],
    end: &'a [f64],
}

impl<'a> WordpieceTokenizer<'a> {
    pub fn new(table: &'a EmbeddingTable) -> Result<Self, InjectError> {
        let get = |key: &'static str| {
            table
                .get(Namespace::Wordpiece, key)
                .ok_or(InjectError::MissingSpecial(key))
        };
        Ok(Self {
            table,
            start: get(START_TOKEN)?,
            end: get(END_TOKEN)?,
            unknown: get(UNKNOWN_TOKEN)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn unknown_embedding(&self) -> &'a [f64] {
        self.unknown
    }

    fn piece(&self, key: &str) -> Option<&'a [f64]> {
        self.table.get(Namespace::Wordpiece, key)
    }

    fn segment_word(&self, word: &str, out: &mut Vec<(String, &'a [f64])>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push((UNKNOWN_TOKEN.to_string(), self.unknown));
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut candidate: String = chars[start..end].iter().collect();
                if start > 0 {
                    candidate.insert_str(0, CONTINUATION_PREFIX);
                }
                if let Some(v) = self.piece(&candidate) {
                    found = Some((candidate, v));
                    break;
                }
                end -= 1;
            }
            match found {
                Some(p) => {
                    pieces.push(p);
                    start = end;
                }
                None => {
                    // a word that cannot be fully segmented is one unknown piece
                    out.push((UNKNOWN_TOKEN.to_string(), self.unknown));
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Wordpieces of `text` (no specials).
    pub fn wordpieces(&self, text: &str) -> Vec<(String, &'a [f64])> {
        let mut out = Vec::new();
        for word in basic_tokenize(text, !self.table.cased()) {
            self.segment_word(&word, &mut out);
        }
        out
    }

    /// The "/" separator row, or the unknown piece when absent.
    pub fn separator(&self) -> &'a [f64] {
        self.piece(SEPARATOR_TOKEN).unwrap_or(self.unknown)
    }
}

struct Emitter<'t> {
    tokens: Vec<Token>,
    budget: usize,
    truncated: bool,
    tokenizer: &'t WordpieceTokenizer<'t>,
}

impl<'t> Emitter<'t> {
    fn new(tokenizer: &'t WordpieceTokenizer<'t>, max_len: usize) -> Self {
        let tokens = vec![Token {
            text: START_TOKEN.to_string(),
            kind: TokenKind::Special,
            embedding: tokenizer.start.to_vec(),
            span_ref: None,
        }];
        Self {
            tokens,
            budget: max_len - 2,
            truncated: false,
            tokenizer,
        }
    }

    fn plain(&mut self, text: &str) {
        if self.truncated {
            return;
        }
        for (piece, emb) in self.tokenizer.wordpieces(text) {
            if self.budget == 0 {
                self.truncated = true;
                return;
            }
            self.budget -= 1;
            self.tokens.push(Token {
                text: piece,
                kind: TokenKind::Wordpiece,
                embedding: emb.to_vec(),
                span_ref: None,
            });
        }
    }

    /// Emits a whole injected group or nothing.
    fn group(&mut self, span_ref: usize, key: &str, entity: Vec<f64>, surface: &str) -> bool {
        if self.truncated {
            return false;
        }
        let pieces = self.tokenizer.wordpieces(surface);
        if pieces.len() + 2 > self.budget {
            self.truncated = true;
            return false;
        }
        self.budget -= pieces.len() + 2;
        self.tokens.push(Token {
            text: key.to_string(),
            kind: TokenKind::Entity,
            embedding: entity,
            span_ref: Some(span_ref),
        });
        self.tokens.push(Token {
            text: SEPARATOR_TOKEN.to_string(),
            kind: TokenKind::Separator,
            embedding: self.tokenizer.separator().to_vec(),
            span_ref: Some(span_ref),
        });
        for (piece, emb) in pieces {
            self.tokens.push(Token {
                text: piece,
                kind: TokenKind::Wordpiece,
                embedding: emb.to_vec(),
                span_ref: Some(span_ref),
            });
        }
        true
    }

    fn finish(mut self, max_len: usize, injected: usize, lookup_misses: usize) -> InjectedSequence {
        self.tokens.push(Token {
            text: END_TOKEN.to_string(),
            kind: TokenKind::Special,
            embedding: self.tokenizer.end.to_vec(),
            span_ref: None,
        });
        InjectedSequence {
            tokens: self.tokens,
            truncated: self.truncated,
            max_len,
            injected,
            lookup_misses,
        }
    }
}

/// `[CLS] wordpieces(text) [SEP]`, truncated to `max_len` with the end
/// marker kept.
pub fn tokenize_baseline(
    text: &str,
    wordpiece_table: &EmbeddingTable,
    max_len: usize,
) -> Result<InjectedSequence, InjectError> {
    if max_len < 2 {
        return Err(InjectError::MaxLenTooSmall(max_len));
    }
    let tokenizer = WordpieceTokenizer::new(wordpiece_table)?;
    let mut emitter = Emitter::new(&tokenizer, max_len);
    emitter.plain(text);
    Ok(emitter.finish(max_len, 0, 0))
}

/// Entity key for a span: its wiki title when that is an entity key,
/// otherwise the titlecased surface when that is.
pub fn resolve_entity_key(span: &EntitySpan, wiki_table: &EmbeddingTable) -> Option<String> {
    if let Some(title) = span.link.wiki_title.as_deref() {
        if wiki_table.contains(Namespace::Entity, title) {
            return Some(title.to_string());
        }
    }
    let key = entity_lookup_key(&span.surface);
    wiki_table.contains(Namespace::Entity, &key).then_some(key)
}

/// Tokenizes `text` and injects aligned entity vectors for every span found
/// in the entity table. Spans that miss the table are ordinary text.
pub fn inject(
    text: &str,
    spans: &[EntitySpan],
    alignment: &AlignmentMap,
    wiki_table: &EmbeddingTable,
    wordpiece_table: &EmbeddingTable,
    max_len: usize,
) -> Result<InjectedSequence, InjectError> {
    if max_len < 2 {
        return Err(InjectError::MaxLenTooSmall(max_len));
    }
    if alignment.source_dim() != wiki_table.dim() || alignment.target_dim() != wordpiece_table.dim()
    {
        return Err(InjectError::DimensionMismatch {
            map_source: alignment.source_dim(),
            map_target: alignment.target_dim(),
            wiki: wiki_table.dim(),
            wordpiece: wordpiece_table.dim(),
        });
    }
    let chars: Vec<char> = text.chars().collect();
    let mut prev_end = 0;
    for (index, span) in spans.iter().enumerate() {
        if span.char_start < prev_end
            || span.char_start >= span.char_end
            || span.char_end > chars.len()
        {
            return Err(InjectError::BadSpan { index });
        }
        prev_end = span.char_end;
    }

    let tokenizer = WordpieceTokenizer::new(wordpiece_table)?;
    let mut emitter = Emitter::new(&tokenizer, max_len);
    let mut cursor = 0;
    let mut injected = 0;
    let mut misses = 0;
    for (index, span) in spans.iter().enumerate() {
        let Some(key) = resolve_entity_key(span, wiki_table) else {
            misses += 1;
            continue;
        };
        let before: String = chars[cursor..span.char_start].iter().collect();
        emitter.plain(&before);
        let source = wiki_table
            .get(Namespace::Entity, &key)
            .expect("key resolved");
        let entity = alignment.map_entity(source)?;
        let surface: String = chars[span.char_start..span.char_end].iter().collect();
        if emitter.group(index, &key, entity, &surface) {
            injected += 1;
        }
        cursor = span.char_end;
    }
    let rest: String = chars[cursor..].iter().collect();
    emitter.plain(&rest);
    Ok(emitter.finish(max_len, injected, misses))
}

/// Debug record for one token (embeddings omitted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub record_id: Option<String>,
    pub text: String,
    pub kind: TokenKind,
    pub span_ref: Option<usize>,
}

/// Writes one JSON line per token.
pub fn write_debug_dump<W: Write>(
    seq: &InjectedSequence,
    record_id: Option<&str>,
    out: &mut W,
) -> Result<(), InjectError> {
    for t in &seq.tokens {
        let rec = TokenRecord {
            record_id: record_id.map(str::to_string),
            text: t.text.clone(),
            kind: t.kind,
            span_ref: t.span_ref,
        };
        serde_json::to_writer(&mut *out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
