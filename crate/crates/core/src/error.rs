use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("constant channel `{0}`: standard deviation over the train region is zero")]
    ConstantChannel(String),

    #[error("series too short: {rows} rows, need at least {needed}")]
    TooShort { rows: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch sizes sum to {got}, but the region has {expected} rolling origins")]
    BatchSizeMismatch { expected: usize, got: usize },

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("invalid batch plan: {0}")]
    InvalidPlan(String),

    #[error("overlap region is empty: horizon {horizon} is smaller than batch size {batch}")]
    EmptyOverlap { horizon: usize, batch: usize },

    #[error("no mini-batch of size {0} in the trace")]
    NoMatchingBatches(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
