//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label value {0} is outside the {{0,1,2,4}} alphabet")]
    InvalidLabel(u8),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("nifti: {0}")]
    Nifti(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Helper for the common "shapes must match" check.
    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch(format!("expected {expected:?}, got {got:?}"))
    }
}
