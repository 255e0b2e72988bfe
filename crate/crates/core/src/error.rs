use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Sentence and token numbers are 1-based.
    #[error("dimension mismatch in sentence {sentence}, token {token}: expected {expected}, found {found}")]
    DimensionMismatch {
        sentence: usize,
        token: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite activation in sentence {sentence}, token {token}")]
    NonFinite { sentence: usize, token: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    /// Divergence during optimization (NaN or infinite loss).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
