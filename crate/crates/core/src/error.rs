use thiserror::Error;

/// Errors raised by the LNS library, the datapath simulator and the training engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid LNS format: {0}")]
    Format(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed tensor encoding: {0}")]
    Encoding(String),
}

pub type Result<T> = std::result::Result<T, Error>;
