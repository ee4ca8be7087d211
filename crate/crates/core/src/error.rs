//! Crate-wide error type.

use std::path::PathBuf;

/// Alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    #[error("config: {0}")]
    Config(String),

    /// Runtime data handed to an operation violates its contract
    /// (shape mismatch, non-unit feature row, label out of range, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// A persisted artifact could not be parsed.
    #[error("parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
