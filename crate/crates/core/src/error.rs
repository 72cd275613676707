//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or axis mismatch. Carries both offending shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Numeric domain violation (log of non-positive value, exp overflow, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation's stated precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Bad hyperparameter or configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Input data does not match what the model or format expects.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file contents. `offset` is the byte position where parsing failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training diverged (NaN loss); carries the offending batch id.
    #[error("numeric failure in batch {batch_id}: {msg}")]
    Numeric { batch_id: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
