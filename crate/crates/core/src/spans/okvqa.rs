use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::word_tokens;
use super::{EntitySpan, OkvqaLevel, SpanError};

/// Declarative span-rejection rules for the intermediate OKVQA level.
///
/// ```toml
/// stopwords = ["the", "a"]
/// generic_nouns = ["park", "man"]
/// generic_labels = ["DATE", "CARDINAL"]
/// min_length = 3
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OkvqaRules {
    #[serde(default)]
    pub stopwords: BTreeSet<String>,
    #[serde(default)]
    pub generic_nouns: BTreeSet<String>,
    #[serde(default)]
    pub generic_labels: BTreeSet<String>,
    #[serde(default)]
    pub min_length: usize,
}

impl Default for OkvqaRules {
    fn default() -> Self {
        let set = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        Self {
            stopwords: set(&[
                "a", "an", "and", "any", "her", "his", "in", "is", "it", "its", "my", "of", "on",
                "one", "or", "our", "some", "that", "the", "their", "these", "this", "those",
                "what", "which", "who", "your",
            ]),
            generic_nouns: set(&[
                "animal", "building", "car", "city", "color", "dog", "food", "kind", "man", "park",
                "people", "person", "photo", "picture", "place", "room", "sport", "street",
                "thing", "time", "type", "water", "woman", "year",
            ]),
            generic_labels: set(&["CARDINAL", "DATE", "ORDINAL", "PERCENT", "QUANTITY", "TIME"]),
            min_length: 3,
        }
    }
}

impl OkvqaRules {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpanError> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SpanError::Config {
            line: 0,
            message: e.to_string(),
        })
    }

    /// Name of the first rule that rejects `span`, if any.
    pub fn rejects(&self, span: &EntitySpan) -> Option<&'static str> {
        let words: Vec<String> = word_tokens(&span.surface)
            .iter()
            .map(|t| t.lower())
            .collect();
        let content: Vec<&String> = words
            .iter()
            .filter(|w| !self.stopwords.contains(*w))
            .collect();
        if content.is_empty() {
            return Some("stopword-only");
        }
        if content.len() == 1 && self.generic_nouns.contains(content[0]) {
            return Some("generic-noun");
        }
        if self.generic_labels.contains(&span.ner_label) {
            return Some("generic-label");
        }
        if span.surface.chars().count() < self.min_length {
            return Some("too-short");
        }
        None
    }
}

/// Reads one lowercased surface per line.
pub fn load_exclusion_list(path: impl AsRef<Path>) -> Result<HashSet<String>, SpanError> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Applies the OKVQA filtering level: passthrough, rule filtering, or rule
/// filtering plus a manual exclusion list.
pub fn filter_okvqa(
    spans: &[EntitySpan],
    level: OkvqaLevel,
    rules: &OkvqaRules,
    exclusions: Option<&HashSet<String>>,
) -> Result<Vec<EntitySpan>, SpanError> {
    match level {
        OkvqaLevel::Ok13k => Ok(spans.to_vec()),
        OkvqaLevel::Ok4k => Ok(spans
            .iter()
            .filter(|s| rules.rejects(s).is_none())
            .cloned()
            .collect()),
        OkvqaLevel::Ok2_5k => {
            let exclusions = exclusions.ok_or(SpanError::ManualListRequired)?;
            Ok(spans
                .iter()
                .filter(|s| {
                    rules.rejects(s).is_none() && !exclusions.contains(&s.surface.to_lowercase())
                })
                .cloned()
                .collect())
        }
    }
}
