use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A loss term or metric produced a non-finite value.
    #[error("numeric failure in {term}: {detail}")]
    Numeric { term: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            detail: detail.into(),
        }
    }
}
