use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes shared by every module.
///
/// [`Error::kind`] buckets them into the three classes the command line maps
/// onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {message}")]
    Header { path: PathBuf, message: String },
    #[error("{path}: header declares {expected} values but the raw file holds {actual} bytes")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for {len} slices")]
    OutOfRange { index: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("corpus overlaps training set: {0}")]
    CorpusOverlap(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("report: {0}")]
    Report(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Numeric(_) | Error::NonFinite { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
