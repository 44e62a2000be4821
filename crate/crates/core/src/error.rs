use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid argument or configuration value.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric failure (NaN/Inf) during compute.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A protocol contract was violated (frozen params updated, wrong data
    /// split fed to a stage, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
