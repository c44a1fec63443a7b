//! Crate-wide error type.
//!
//! Variants are grouped by how callers are expected to react: `Config`,
//! `Validation` and `Integrity` are caller mistakes or corrupted state
//! (CLI exit code 1), `Format`, `UnsupportedEncoding` and `Io` are file
//! problems (CLI exit code 2).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes, channel counts or layer configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input data (labels out of range, mismatched volumes, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Internal state that should have been consistent but is not
    /// (truncated checkpoints, parameter/gradient mismatches, non-finite
    /// losses).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A file that does not follow the expected binary format.
    #[error("format error: {0}")]
    Format(String),

    /// A recognised but unsupported encoding; the message names the remedy.
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Integrity(_) => 1,
            Error::Format(_) | Error::UnsupportedEncoding(_) | Error::Io(_) => 2,
        }
    }
}
