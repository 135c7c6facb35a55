use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error in `{array}`: {reason}")]
    Validation { array: String, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parse error at {file}:{line}: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at iteration {iter} (frame {frame}): {value}")]
    NonFiniteLoss { iter: u64, frame: String, value: f64 },
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(array: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            array: array.into(),
            reason: reason.into(),
        }
    }
}
