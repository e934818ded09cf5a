//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced while reading or writing checkpoint files.
///
/// Each corruption mode gets its own variant so callers (and tests) can tell
/// a bad magic apart from a truncated blob section.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: expected \"S2C1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u8, supported: u8 },
    #[error("checkpoint precision is {found}-byte floats but {expected}-byte floats were requested")]
    Precision { found: u8, expected: u8 },
    #[error("truncated blob section: tensor {tensor:?} needs bytes {start}..{end} but file has {available}")]
    Truncated {
        tensor: String,
        start: u64,
        end: u64,
        available: u64,
    },
    #[error("inconsistent blob index: {0}")]
    Index(String),
    #[error("malformed header: {0}")]
    Header(String),
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("function preservation failed: max abs logit diff {max_abs_diff} exceeds tolerance {tol}")]
    Preservation { max_abs_diff: f64, tol: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn consistency(msg: impl Into<String>) -> Self {
        Error::Consistency(msg.into())
    }
    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }
}
