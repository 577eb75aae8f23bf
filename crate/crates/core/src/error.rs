use std::path::PathBuf;

use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error. Each variant maps onto one CLI exit code class.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("trace invariant violated (sample {sample_id}): {message}")]
    TraceInvariant { sample_id: String, message: String },

    #[error("cache conflict for digest {digest}: stored payload differs")]
    CacheConflict { digest: String },

    #[error("join mismatch: {0}")]
    Mismatch(String),

    #[error("fixture corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 config, 2 data, 3 backend unreachable.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 1,
            Error::Backend(b) if b.is_unreachable() => 3,
            _ => 2,
        }
    }
}
