use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("input dims {height}x{width} are not divisible by {multiple}")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("encoder row {row}: {reason}")]
    InvalidSpec { row: usize, reason: String },

    #[error("non-finite {what} in `{name}`")]
    NonFinite { what: &'static str, name: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            op,
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
