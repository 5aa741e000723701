use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("span <{start},{end}> is out of range for a sentence of {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("gold spans <{}, {}> and <{}, {}> overlap", .first.0, .first.1, .second.0, .second.1)]
    OverlappingGold {
        first: (usize, usize),
        second: (usize, usize),
    },

    #[error("unknown entity type `{0}`")]
    UnknownType(String),

    #[error("invalid type list: {0}")]
    InvalidTypeList(String),

    #[error("embedding dimension mismatch on line {line}: expected {expected}, found {found}")]
    Dimension {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("span of {len} tokens exceeds the maximum span length {max}")]
    SpanTooLong { len: usize, max: usize },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
