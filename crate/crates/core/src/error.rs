use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value or key is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data violates its declared domain (e.g. a class id out of range).
    #[error("data error: {0}")]
    Data(String),
    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// A computed result failed a self-check before being written.
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format { .. } => 2,
            _ => 1,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
