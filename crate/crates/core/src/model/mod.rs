//! A small three-encoder co-attention transformer (language, vision,
//! cross-modality) with an answer classifier, trained from scratch on top of
//! injected token embeddings.
//!
//! All arithmetic is `f64`. Attention probabilities are tape nodes, so their
//! gradients and a perturbation hook come with every forward pass.

mod network;
mod regions;
pub mod tape;
mod train;

use thiserror::Error;

pub use network::{
    attention_gradients, attention_gradients_weighted, forward, forward_with_hook, init_model,
    loss_and_gradients, AttentionGrads, AttentionMaps, AttnHook, AttnKind, AttnSite, ForwardTrace,
    Model, ModelConfig, VisualInput,
};
pub use regions::{RegionEntry, RegionStore};
pub use train::{
    accuracy, finetune, load_checkpoint, predict_logits, predict_topk, save_checkpoint,
    topk_indices, AnswerVocab, EpochMetrics, TrainConfig, TrainingExample, TrainingMetrics,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target class {target} is outside the answer vocabulary of {size}")]
    TargetOutOfRange { target: usize, size: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("empty answer vocabulary")]
    EmptyVocabulary,
    #[error("no trainable examples")]
    NoTrainableExamples,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("region store: {0}")]
    Regions(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
