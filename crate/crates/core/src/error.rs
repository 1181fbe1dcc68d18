//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by any module of this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is inconsistent or out of its documented domain.
    #[error("invalid config: {0}")]
    Config(String),

    /// Inputs are structurally valid but numerically unusable
    /// (non-finite values, undefined statistics, diverged loss).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset contents violate an invariant (labels, speakers, tasks).
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents cannot be decoded.
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
