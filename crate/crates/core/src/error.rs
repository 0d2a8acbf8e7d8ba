//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file that does not conform to its format. `row` is 1-based for text
    /// formats and the 0-based sample index for binary formats.
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("k = {k} out of range for {n} samples (need 1 <= k <= {max})", max = n.saturating_sub(1))]
    KOutOfRange { k: usize, n: usize },

    #[error("cannot form {z} clusters from {n} samples")]
    TooManyClusters { z: usize, n: usize },

    #[error("invalid configuration for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("segmentation trial {trial} failed after {attempts} attempts: {last}")]
    TrialFailed {
        trial: usize,
        attempts: usize,
        last: Box<Error>,
    },

    #[error("{0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
