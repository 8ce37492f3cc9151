use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("degenerate batch: batch norm in train mode needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward: {0}")]
    Backward(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
