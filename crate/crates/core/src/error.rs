use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's contract.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A non-finite value escaped an operation.
    #[error("numeric fault in {op}: {detail}")]
    NumericFault { op: String, detail: String },

    /// API misuse, e.g. calling backward on a tensor that is not on the tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// Inconsistent state between federated participants.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("undefined {0}")]
    Undefined(String),

    #[error("serialization error: {0}")]
    Serde(String),

    /// An error raised inside a named pipeline stage.
    #[error("stage `{stage}` failed (repeat {repeat}): {source}")]
    Stage {
        stage: String,
        repeat: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
