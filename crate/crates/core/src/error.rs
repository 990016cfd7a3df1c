use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PimmsError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("config error: key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: u64, reason: String },

    #[error("statistics: {0}")]
    Statistics(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PimmsError>;

impl PimmsError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PimmsError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PimmsError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PimmsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PimmsError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        PimmsError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
