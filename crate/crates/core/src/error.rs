use thiserror::Error;

use crate::oracle::OracleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("enumeration of {size} prompt sequences exceeds the limit of {limit}")]
    Capacity { size: f64, limit: f64 },

    #[error("bound not applicable: {0}")]
    BoundInapplicable(String),

    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
