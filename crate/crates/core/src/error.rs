//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by any operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a precondition (bad shape, out-of-range index, empty batch, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// A computation produced or encountered a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary file failed structural validation. `offset` is the byte
    /// position at which decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A text record failed to parse. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A parsed record violated a dataset invariant. `line` is 1-based.
    #[error("validation error at line {line}, field `{field}`: {message}")]
    Validation {
        line: usize,
        field: String,
        message: String,
    },

    /// Two task vectors cannot span a plane.
    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    /// A report input is missing or unreadable.
    #[error("report error: missing or unreadable `{0}`")]
    Report(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
