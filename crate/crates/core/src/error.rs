use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite component at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("vector dimension must be at least 1")]
    EmptyVector,

    /// Invalid configuration. The message names the offending field.
    #[error("{0}")]
    Config(String),

    #[error("index {index} out of range for dataset of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing constants: {}", .0.join(", "))]
    MissingConstants(Vec<String>),

    #[error("run aborted at step {step}: {reason}")]
    Aborted {
        step: usize,
        reason: String,
        /// Parameters after the last step that completed.
        last_good: Vec<f64>,
    },

    #[error("every grid cell aborted\n{0}")]
    AllAborted(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the caller's configuration rather than by
    /// the numerics of a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::IndexOutOfRange { .. }
                | Error::MissingConstants(_)
                | Error::Json(_)
                | Error::Precondition(_)
        )
    }
}
