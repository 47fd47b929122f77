use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NptlError>;

#[derive(Debug, Error)]
pub enum NptlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("all {count} posterior members diverged")]
    AllMembersDiverged { count: usize },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl NptlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NptlError::Io { path: path.into(), source }
    }
}

/// Shorthand for `Err(NptlError::InvalidArgument(..))`.
macro_rules! invalid {
    ($($arg:tt)*) => {
        Err($crate::error::NptlError::InvalidArgument(format!($($arg)*)))
    };
}
pub(crate) use invalid;
