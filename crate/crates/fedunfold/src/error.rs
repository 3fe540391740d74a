use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// config/shape/infeasible problems exit 1, non-finite numerics exit 2,
/// file problems exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("infeasible partition: {0}")]
    Infeasible(String),
    #[error("bad data file: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Infeasible(_) => 1,
            Error::NonFinite(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
