//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the execution model and the lookup pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector, matrix, or packed layout does not fit the available slots.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// An operation would drop a ciphertext below the minimum level.
    /// Signals a missing bootstrap.
    #[error("level exhausted: {0}")]
    Level(String),

    /// A parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Client encoding and server packing disagree on slot positions.
    #[error("layout mismatch: {0}")]
    Layout(String),

    /// A BSGS plan does not cover the diagonals it is applied to.
    #[error("plan mismatch: {0}")]
    Plan(String),

    /// A cost table cannot resolve an op kind present in a ledger.
    #[error("cost table configuration error: {0}")]
    CostConfig(String),

    /// Invalid or inconsistent configuration input.
    #[error("config error: {0}")]
    Config(String),

    /// An index is outside its table's row count.
    #[error("index out of range: {0}")]
    Index(String),

    /// File I/O failure, with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
