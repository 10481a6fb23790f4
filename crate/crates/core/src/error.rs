use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Format(String),
}

impl Error {
    /// Stable machine-parsable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Index(_) => "index",
            Error::Value(_) => "value",
            Error::NotFound(_) => "not-found",
            Error::Config(_) => "config",
            Error::Version(_) => "version",
            Error::NonFinite { .. } => "non-finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Format(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<safetensors::SafeTensorError> for Error {
    fn from(e: safetensors::SafeTensorError) -> Self {
        Error::Format(e.to_string())
    }
}
