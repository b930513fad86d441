use thiserror::Error;

/// Errors produced by dataset handling, weight computation, training and
/// evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A per-class quantity is undefined for the given counts.
    #[error("class {class}: {reason}")]
    Domain { class: usize, reason: String },

    /// Two vectors that must agree in length do not.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A CSV row could not be parsed. Rows are numbered from 1, header
    /// excluded.
    #[error("row {row}: {reason}")]
    Parse { row: usize, reason: String },

    /// A loss or gradient came out non-finite.
    #[error("non-finite loss")]
    NonFiniteLoss,

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
