use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::SpanError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaEntity {
    pub name: String,
    #[serde(default)]
    pub wiki_title: Option<String>,
}

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub caption: Option<String>,
    pub image_ref: String,
    #[serde(default)]
    pub answers: Vec<Answer>,
    #[serde(default)]
    pub question_types: Vec<String>,
    #[serde(default)]
    pub meta_entities: Vec<MetaEntity>,
    pub split: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TextField {
    Question,
    Caption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkStatus {
    Unlinked,
    Verified,
    Searched,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Link {
    #[serde(rename = "link_status")]
    pub status: LinkStatus,
    pub wiki_title: Option<String>,
}

impl Link {
    pub fn unlinked() -> Self {
        Self {
            status: LinkStatus::Unlinked,
            wiki_title: None,
        }
    }
}

/// A detected mention. Offsets are character (not byte) positions into the
/// composed text, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub surface: String,
    pub field: TextField,
    pub char_start: usize,
    pub char_end: usize,
    pub ner_label: String,
    #[serde(flatten)]
    pub link: Link,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.char_end - self.char_start
    }

    pub fn is_empty(&self) -> bool {
        self.char_end == self.char_start
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.char_start < other.char_end && other.char_start < self.char_end
    }
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = SpanError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(SpanError::UnknownName {
                        kind: stringify!($name),
                        name: other.to_string(),
                    }),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpanMethod {
    #[serde(rename = "nerper")]
    NerPer,
    #[serde(rename = "neragro")]
    NerAgro,
    #[serde(rename = "meta")]
    Meta,
    #[serde(rename = "ok13k")]
    Ok13k,
    #[serde(rename = "ok4k")]
    Ok4k,
    #[serde(rename = "ok2_5k")]
    Ok2_5k,
}

string_enum!(SpanMethod {
    NerPer => "nerper",
    NerAgro => "neragro",
    Meta => "meta",
    Ok13k => "ok13k",
    Ok4k => "ok4k",
    Ok2_5k => "ok2_5k",
});

impl SpanMethod {
    /// The OKVQA filtering level, for the three `ok*` methods.
    pub fn okvqa_level(&self) -> Option<OkvqaLevel> {
        match self {
            SpanMethod::Ok13k => Some(OkvqaLevel::Ok13k),
            SpanMethod::Ok4k => Some(OkvqaLevel::Ok4k),
            SpanMethod::Ok2_5k => Some(OkvqaLevel::Ok2_5k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    AsIs,
    Links,
    Noisy,
}

string_enum!(LinkMode {
    AsIs => "as_is",
    Links => "links",
    Noisy => "noisy",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OkvqaLevel {
    Ok13k,
    Ok4k,
    Ok2_5k,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanEntry {
    pub composed_text: String,
    pub spans: Vec<EntitySpan>,
}

/// Spans for a whole dataset produced by one method and link mode, in
/// dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanSet {
    pub method: SpanMethod,
    pub link_mode: LinkMode,
    pub entries: IndexMap<String, SpanEntry>,
}

impl SpanSet {
    pub fn new(method: SpanMethod, link_mode: LinkMode) -> Self {
        Self {
            method,
            link_mode,
            entries: IndexMap::new(),
        }
    }

    pub fn spans(&self, record_id: &str) -> &[EntitySpan] {
        self.entries
            .get(record_id)
            .map(|e| e.spans.as_slice())
            .unwrap_or(&[])
    }

    pub fn composed_text(&self, record_id: &str) -> Option<&str> {
        self.entries
            .get(record_id)
            .map(|e| e.composed_text.as_str())
    }

    pub fn total_spans(&self) -> usize {
        self.entries.values().map(|e| e.spans.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanStats {
    pub ents_per_q: f64,
    pub eberts_per_q: f64,
    pub frac_q_with_eberts: f64,
}
