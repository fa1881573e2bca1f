//! Hermetic taggers: a gazetteer-backed named-entity tagger and a
//! lexicon-driven noun-phrase chunker.
//!
//! Both are deterministic. External taggers can be used instead by
//! implementing [`NerProvider`] / [`NounChunker`].

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::text::{word_tokens, WordToken};
use super::SpanError;

pub const PERSON: &str = "PERSON";
pub const MISC: &str = "MISC";
pub const NOUN_CHUNK: &str = "NOUN_CHUNK";

/// Labels a tagger may emit.
pub const LABELS: &[&str] = &[
    PERSON,
    "NORP",
    "ORG",
    "GPE",
    "LOC",
    "FAC",
    "EVENT",
    "WORK_OF_ART",
    "DATE",
    "TIME",
    "CARDINAL",
    "ORDINAL",
    "QUANTITY",
    MISC,
    NOUN_CHUNK,
];

/// A labeled character range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NerSpan {
    pub char_start: usize,
    pub char_end: usize,
    pub label: String,
}

pub trait NerProvider: Send + Sync {
    fn tag(&self, text: &str) -> Vec<NerSpan>;
}

pub trait NounChunker: Send + Sync {
    fn chunk(&self, text: &str) -> Vec<NerSpan>;
}

/// Capitalized words that only start a run when they are not a sentence
/// opener.
const OPENERS: &[&str] = &[
    "a", "an", "are", "as", "at", "by", "can", "could", "did", "do", "does", "for", "from", "has",
    "have", "he", "her", "his", "how", "i", "in", "is", "it", "its", "name", "of", "on", "she",
    "that", "the", "their", "there", "these", "they", "this", "those", "to", "was", "were", "what",
    "when", "where", "which", "who", "whom", "whose", "why", "will", "with", "would",
];

fn is_opener(token: &WordToken) -> bool {
    OPENERS.contains(&token.lower().as_str())
}

/// Maximal runs of capitalized tokens separated only by whitespace. A
/// sentence-initial function word does not start a run.
fn capitalized_runs(tokens: &[WordToken], taken: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let usable = |k: usize| !taken[k] && tokens[k].is_capitalized();
        if !usable(i) || (tokens[i].sentence_initial && is_opener(&tokens[i])) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < tokens.len()
            && usable(j)
            && tokens[j].joined_to_previous
            && !tokens[j].sentence_initial
        {
            j += 1;
        }
        runs.push((i, j));
        i = j;
    }
    runs
}

/// Name list with labels, matched on whole tokens, longest entry first.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    by_first: HashMap<String, Vec<(Vec<String>, String)>>,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, label: &str) {
        let toks: Vec<String> = word_tokens(name).into_iter().map(|t| t.text).collect();
        if toks.is_empty() {
            return;
        }
        let bucket = self.by_first.entry(toks[0].clone()).or_default();
        if bucket.iter().any(|(t, _)| *t == toks) {
            return;
        }
        bucket.push((toks, label.to_string()));
        bucket.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut g = Self::new();
        for (name, label) in entries {
            g.insert(name, label);
        }
        g
    }

    /// Tab-separated `name<TAB>LABEL` lines; `#` starts a comment line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpanError> {
        let text = fs::read_to_string(path)?;
        let mut g = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, label) = line.split_once('\t').ok_or_else(|| SpanError::Config {
                line: i + 1,
                message: "expected `name<TAB>LABEL`".to_string(),
            })?;
            g.insert(name.trim(), label.trim());
        }
        Ok(g)
    }

    fn longest_at(&self, tokens: &[WordToken], at: usize) -> Option<(usize, &str)> {
        let candidates = self.by_first.get(&tokens[at].text)?;
        candidates.iter().find_map(|(toks, label)| {
            let end = at + toks.len();
            if end > tokens.len() {
                return None;
            }
            let matches = toks.iter().enumerate().all(|(k, t)| {
                let tok = &tokens[at + k];
                tok.text == *t && (k == 0 || tok.joined_to_previous)
            });
            matches.then_some((end, label.as_str()))
        })
    }
}

/// Gazetteer matches first, then capitalized runs over the remaining tokens:
/// runs of two or more words are tagged `PERSON`, single words `MISC`.
#[derive(Debug, Clone, Default)]
pub struct GazetteerNer {
    pub gazetteer: Gazetteer,
}

impl GazetteerNer {
    pub fn new(gazetteer: Gazetteer) -> Self {
        Self { gazetteer }
    }
}

impl NerProvider for GazetteerNer {
    fn tag(&self, text: &str) -> Vec<NerSpan> {
        let tokens = word_tokens(text);
        let mut taken = vec![false; tokens.len()];
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if let Some((end, label)) = self.gazetteer.longest_at(&tokens, i) {
                spans.push(NerSpan {
                    char_start: tokens[i].start,
                    char_end: tokens[end - 1].end,
                    label: label.to_string(),
                });
                taken[i..end].iter_mut().for_each(|t| *t = true);
                i = end;
            } else {
                i += 1;
            }
        }
        for (a, b) in capitalized_runs(&tokens, &taken) {
            spans.push(NerSpan {
                char_start: tokens[a].start,
                char_end: tokens[b - 1].end,
                label: if b - a >= 2 { PERSON } else { MISC }.to_string(),
            });
        }
        spans.sort_by_key(|s| (s.char_start, s.char_end));
        spans
    }
}

const DEFAULT_DETERMINERS: &[&str] = &[
    "a", "an", "another", "any", "each", "every", "her", "his", "its", "my", "our", "some", "that",
    "the", "their", "these", "this", "those", "your",
];

const DEFAULT_ADJECTIVES: &[&str] = &[
    "big", "black", "blue", "brown", "famous", "first", "green", "large", "last", "little", "new",
    "old", "red", "small", "tall", "white", "yellow", "young",
];

const DEFAULT_NOUNS: &[&str] = &[
    "actor",
    "animal",
    "athlete",
    "ball",
    "band",
    "bird",
    "boat",
    "book",
    "building",
    "bus",
    "car",
    "cat",
    "child",
    "church",
    "city",
    "country",
    "dog",
    "event",
    "face",
    "family",
    "film",
    "flag",
    "food",
    "game",
    "girl",
    "boy",
    "group",
    "horse",
    "house",
    "image",
    "kind",
    "lady",
    "man",
    "men",
    "movie",
    "music",
    "painting",
    "park",
    "people",
    "person",
    "photo",
    "photograph",
    "picture",
    "place",
    "plane",
    "player",
    "politician",
    "river",
    "road",
    "room",
    "school",
    "sign",
    "singer",
    "song",
    "sport",
    "stadium",
    "statue",
    "street",
    "table",
    "team",
    "time",
    "tower",
    "train",
    "tree",
    "truck",
    "war",
    "water",
    "woman",
    "women",
    "writer",
    "year",
];

/// Noun-phrase chunker: maximal capitalized runs plus
/// `determiner adjective* noun+` patterns from a small POS lexicon.
#[derive(Debug, Clone)]
pub struct LexiconChunker {
    pub determiners: BTreeSet<String>,
    pub adjectives: BTreeSet<String>,
    pub nouns: BTreeSet<String>,
}

impl Default for LexiconChunker {
    fn default() -> Self {
        let set = |words: &[&str]| words.iter().map(|w| w.to_string()).collect();
        Self {
            determiners: set(DEFAULT_DETERMINERS),
            adjectives: set(DEFAULT_ADJECTIVES),
            nouns: set(DEFAULT_NOUNS),
        }
    }
}

impl NounChunker for LexiconChunker {
    fn chunk(&self, text: &str) -> Vec<NerSpan> {
        let tokens = word_tokens(text);
        let mut taken = vec![false; tokens.len()];
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if !self.determiners.contains(&tokens[i].lower()) {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < tokens.len()
                && tokens[j].joined_to_previous
                && self.adjectives.contains(&tokens[j].lower())
            {
                j += 1;
            }
            let noun_start = j;
            while j < tokens.len()
                && tokens[j].joined_to_previous
                && self.nouns.contains(&tokens[j].lower())
            {
                j += 1;
            }
            if j > noun_start {
                spans.push(NerSpan {
                    char_start: tokens[i].start,
                    char_end: tokens[j - 1].end,
                    label: NOUN_CHUNK.to_string(),
                });
                taken[i..j].iter_mut().for_each(|t| *t = true);
                i = j;
            } else {
                i += 1;
            }
        }
        for (a, b) in capitalized_runs(&tokens, &taken) {
            spans.push(NerSpan {
                char_start: tokens[a].start,
                char_end: tokens[b - 1].end,
                label: NOUN_CHUNK.to_string(),
            });
        }
        spans.sort_by_key(|s| (s.char_start, s.char_end));
        spans
    }
}
