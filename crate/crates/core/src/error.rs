use std::path::PathBuf;

use thiserror::Error;

use crate::event_log::Channel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: frame {frame} does not follow previous frame {previous}")]
    Ordering { line: u64, frame: u64, previous: u64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("channel {0} is not present in the series")]
    MissingChannel(Channel),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("intervals in {0} list overlap or are unsorted")]
    UnsortedIntervals(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("too few files: need at least {needed}, have {available}")]
    TooFewFiles { needed: usize, available: usize },

    // the cause is part of the message rather than a `source()`, so
    // chained reports don't print it twice
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("{path}: {cause}")]
    InFile { path: PathBuf, cause: Box<Error> },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    pub(crate) fn in_file(path: impl Into<PathBuf>, cause: Error) -> Self {
        Error::InFile {
            path: path.into(),
            cause: Box::new(cause),
        }
    }
}
