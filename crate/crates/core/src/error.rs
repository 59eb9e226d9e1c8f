use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dims {dims:?}: {reason}")]
    InvalidDims { dims: Vec<usize>, reason: String },

    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),

    #[error("wrong detector mode: {0}")]
    WrongMode(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("malformed {format} file: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}
