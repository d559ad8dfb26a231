use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that violate its contract
    /// (dimension mismatch, fully masked softmax row, prompt entry offered
    /// to a pruned cache layer, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A structurally invalid configuration (odd head dimension, k > N, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input exceeds a configured capacity (sequence longer than max_positions).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A data file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }
}
