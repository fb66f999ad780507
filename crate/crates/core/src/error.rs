//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration (bad key, bad value, bad network spec).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A computation produced or would produce a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed on-disk data (IDX payload, checkpoint, CSV).
    #[error("format error: {0}")]
    Format(String),

    /// An API contract was violated by the caller (e.g. backward called twice).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A verification check (gradient oracle, tolerance gate) failed.
    #[error("check failed: {0}")]
    Check(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
