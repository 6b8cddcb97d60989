//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid architecture or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// On-disk data did not match its documented format.
    #[error("format error: {0}")]
    Format(String),

    /// Operation called in a state that does not admit it.
    #[error("state error: {0}")]
    State(String),

    /// Internal bookkeeping does not cover the data it should.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Non-finite values or out-of-range indices during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format(_) => 3,
            Error::Shape(_) | Error::State(_) | Error::Integrity(_) => 4,
            Error::Numeric(_) => 5,
            Error::Io(_) | Error::Json(_) => 6,
        }
    }
}
