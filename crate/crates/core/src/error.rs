use alloc::string::String;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
