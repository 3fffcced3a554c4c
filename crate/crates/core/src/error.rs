use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} is not in the active class set")]
    InvalidLabel { label: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("backward called without a retained forward pass")]
    NoForwardContext,

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no blank subspace for task {task}: {task} x {size} exceeds feature dim {dim}")]
    NoBlankSubspace { task: usize, size: usize, dim: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("accuracy matrix row {row} is incomplete")]
    IncompleteRow { row: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
