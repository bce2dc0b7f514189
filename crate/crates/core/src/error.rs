use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the benchmark.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument or config value violates a precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller used an API out of contract (wrong index, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A manifest or feature file could not be ingested.
    #[error("ingestion error at {location}: {message}")]
    Ingestion { location: String, message: String },

    /// Stored state does not match what it is being restored into.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A value went non-finite or a guard tripped during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A probe could not be trained or evaluated.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingestion(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            location: location.into(),
            message: message.into(),
        }
    }
}
