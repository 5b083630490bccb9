use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint fingerprint mismatch: stored {stored}, current {current}")]
    Fingerprint { stored: String, current: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Encoding(_) => "encoding",
            Error::Divergence(_) => "divergence",
            Error::Fingerprint { .. } => "fingerprint",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
