use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator, the learning engine and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad spec values, shape mismatches,
    /// missing standardization constants, missing checkpoints).
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an input contract (unsorted series, non-normalized
    /// distribution, stale cache).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Malformed or incompatible on-disk artifact.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
