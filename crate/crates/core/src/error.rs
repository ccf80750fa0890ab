use thiserror::Error;

/// Error type shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not satisfy an operation's shape contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API was called out of order or on the wrong kind of value.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid; the message names the field.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data violates a documented precondition (bad label, absent class...).
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be parsed; `offset` is the byte where parsing failed.
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
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
