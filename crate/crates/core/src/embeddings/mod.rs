//! Embedding tables and the linear map that carries entity vectors into the
//! wordpiece space of the language encoder.
//!
//! Tables hold three namespaces (words, entities, wordpieces). An
//! [`AlignmentMap`] is fit by ordinary least squares over the words that
//! exist both as entity-table words and as full wordpieces, and is then
//! applied to entity vectors with [`AlignmentMap::map_entity`].

mod alignment;
mod table;

pub use alignment::{learn_alignment, AlignmentMap, FitInfo};
pub use table::{shared_vocabulary, EmbeddingTable, Namespace, NamespacePolicy, SharedKey};

use thiserror::Error;

/// Prefix that marks entity rows in text embedding files.
pub const ENTITY_PREFIX: &str = "ENTITY/";

/// Prefix of wordpiece continuation pieces.
pub const CONTINUATION_PREFIX: &str = "##";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("missing header")]
    MissingHeader,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    RowDimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("no shared vocabulary")]
    NoSharedVocabulary,
    #[error("alignment requires at least one shared key")]
    EmptyKeys,
    #[error("key `{0}` not found")]
    MissingKey(String),
    #[error("non-finite value in vector for `{0}`")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EmbeddingError> = std::result::Result<T, E>;
