//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed shapes, kinds or values the operation cannot accept.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A linear system or iterative solve failed numerically.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Synthetic pair generation exhausted its rejection-sampling budget.
    #[error("pair generation failed after {attempts} attempts: {detail}")]
    Generation { attempts: usize, detail: String },

    /// Robust estimation could not produce a model (e.g. too few matches).
    #[error("estimation failed: {0}")]
    Estimation(String),

    /// A metric is undefined for the given inputs (empty keypoint set, empty union).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Checkpoint file is malformed, truncated or of an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset manifest or benchmark record file is malformed.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Training aborted (non-finite loss, kind mismatch).
    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
