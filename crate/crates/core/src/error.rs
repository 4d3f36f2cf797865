use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error in `{op}`: non-finite value produced")]
    Numeric { op: &'static str },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("empty computation record: loss is detached from every tensor requiring grad")]
    EmptyRecord,

    #[error("degenerate batch: batch statistics need at least 2 samples, got {0}")]
    DegenerateBatch(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stream validation error: {0}")]
    StreamValidation(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
