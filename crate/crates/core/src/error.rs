//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DppError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("{path}: {reason} at byte offset {offset}")]
    CorruptFile {
        path: String,
        reason: String,
        offset: u64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DppError>;
