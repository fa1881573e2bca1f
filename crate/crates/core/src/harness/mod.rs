//! Dataset ingestion, the synthetic benchmark, evaluation metrics,
//! confidence-gated injection, report emission and the end-to-end pipeline.

pub mod dataset;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod scoring;
pub mod synth;

use thiserror::Error;

pub use dataset::{load_dataset, read_dataset, split_indices, write_dataset};
pub use metrics::{
    aggregate, aggregate_runs, confidence_gated_injection, evaluate, AggregateStat, EvalItem,
    EvalOptions, EvalReport, ExplanationStats, GatedInput, GatingResult, Prediction, RunMetadata,
    TypeStats,
};
pub use pipeline::{
    evaluate_split, model_config, prepare_data, run_pipeline, sha256_file, train_model,
    DataSection, EvalSection, InjectorSection, Manifest, ModelSection, PipelineOutput,
    PreparedData, RunConfig, SpanSection,
};
pub use report::{
    csv_to_json, emit_report, render, render_csv, render_json, render_markdown, GatingSummary,
    PerturbationRow, ReportFormat, RunSummary, TrainingSummary,
};
pub use scoring::{normalize_answer, score_answer, ScoreMode};
pub use synth::{generate_synthetic_dataset, DataPaths, SynthConfig, SyntheticBenchmark};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("empty evaluation split")]
    EmptyEvalSplit,
    #[error("empty holdout set")]
    EmptyHoldout,
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Embedding(#[from] crate::embeddings::EmbeddingError),
    #[error(transparent)]
    Span(#[from] crate::spans::SpanError),
    #[error(transparent)]
    Inject(#[from] crate::injector::InjectError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Explain(#[from] crate::explain::ExplainError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Csv(e.to_string())
    }
}
