//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Input outside an operation's valid domain (log of non-positive, division by zero).
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite values or numerically degenerate input (rank deficiency).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed on-disk data (labels out of range, corrupt files).
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
