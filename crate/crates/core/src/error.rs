use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PivotError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}; truncate upstream")]
    SequenceTooLong { len: usize, max: usize },

    #[error("target index {index} out of range for head `{head}` of size {size}")]
    TargetOutOfRange {
        head: String,
        index: usize,
        size: usize,
    },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

pub type Result<T> = std::result::Result<T, PivotError>;

impl PivotError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PivotError::Io {
            path: path.into(),
            source,
        }
    }
}
