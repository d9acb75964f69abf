//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input's dimensions do not match what the operation expects.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A configuration value violates its documented invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An input value violates a precondition (empty, non-positive, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A reconstruction produced a non-finite loss or iterate.
    #[error("numerical failure at iteration {iteration}: {detail}")]
    NumericalFailure { iteration: usize, detail: String },

    /// A file could not be parsed as the format its extension/magic claims.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
