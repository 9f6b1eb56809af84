use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("checkpoint error in `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("checkpoint was built for a different model: `{field}` is {checkpoint} in the checkpoint but {requested} in the requested config")]
    ConfigMismatch {
        field: String,
        checkpoint: String,
        requested: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at step {step} (batch ids: {ids:?})")]
    NonFinite { step: usize, ids: Vec<String> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
