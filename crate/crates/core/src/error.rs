//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Layer list is not shape-consistent; names the offending layer pair.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input shape does not match what an operation expects.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A cache or auxiliary structure does not belong to the given state.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Non-finite value where finiteness is required; names the tensor.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Argument outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Dataset/protocol violation (empty class, unseen label, too few samples).
    #[error("data error: {0}")]
    Data(String),

    /// Manifest or config text could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Checkpoint/model container is invalid.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
