//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape does not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A forward or backward pass produced NaN or Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid argument outside of shape problems (bad stride, epsilon, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Autodiff misuse: backward twice, non-scalar loss, missing forward.
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Dataset / manifest problems.
    #[error("data error: {0}")]
    Data(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
