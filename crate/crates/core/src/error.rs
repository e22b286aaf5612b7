use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("no maskable word in caption {0:?}")]
    NoMaskableWord(String),

    #[error("relevance map unavailable: {0}")]
    RelevanceUnavailable(String),

    #[error("query needs {length} tokens but the context holds {context}")]
    QueryTooLong { length: usize, context: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("stale index: {0}")]
    StaleIndex(String),

    #[error("malformed data in {path}:{line}:{column}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("bad container {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("image decode failed for {locator}: {message}")]
    Decode { locator: String, message: String },

    #[error("fetch failed for {url}: {message}")]
    Fetch { url: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(what: &str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by configuration rather than data or runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::DimensionMismatch { .. })
    }
}
