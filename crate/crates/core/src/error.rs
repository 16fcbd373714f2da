//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("decomposition of {tensor} failed on Fourier slice {slice}: {reason}")]
    Decomposition {
        tensor: String,
        slice: usize,
        reason: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach a tensor name to a decomposition error.
    pub(crate) fn in_tensor(self, name: &str) -> Self {
        match self {
            Error::Decomposition { slice, reason, .. } => Error::Decomposition {
                tensor: name.to_string(),
                slice,
                reason,
            },
            other => other,
        }
    }
}
