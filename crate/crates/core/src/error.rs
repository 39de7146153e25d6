//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data error for entry {id}: {msg}")]
    Data { id: String, msg: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn data(id: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data { id: id.into(), msg: msg.into() }
    }

    /// Process exit code the CLI maps this error to: 2 for configuration or
    /// usage problems, 3 for data and runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
