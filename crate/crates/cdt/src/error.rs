use thiserror::Error;

/// Crate-wide error, classified so the CLI can map failures to exit codes:
/// usage 2, data 3, numeric 4.
#[derive(Error, Debug)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Errors surfacing from the tensor backend after input validation;
    /// treated as numeric failures.
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self::Numeric(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Candle(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
