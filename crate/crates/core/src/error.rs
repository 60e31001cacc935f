use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("unsupported image format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("image/mask pairing error: {0}")]
    Pairing(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("out of memory: {required} bytes needed, limit {limit} bytes")]
    OutOfMemory { required: usize, limit: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
