use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("source mismatch between base and drift pools: {0}")]
    SourceMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate label set")]
    DegenerateLabels,

    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite value: {0}")]
    NonFinite(&'static str),

    #[error("csv {path}: row {row}, column {column}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("csv {path}: {message}")]
    CsvFile { path: PathBuf, message: String },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("out-of-order batch: expected step {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },

    #[error("stream too short: need {needed} batches, got {got}")]
    StreamTooShort { needed: usize, got: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("alarm at step {step} is outside the report range")]
    AlarmOutsideReport { step: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
