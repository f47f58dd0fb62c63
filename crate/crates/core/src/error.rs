use thiserror::Error;

/// Errors raised by the simulator and certification routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or lengths that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value outside the domain of an operation (non-unitary input, bad probability, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A request beyond the sizes this crate is willing to brute-force.
    #[error("capacity error: {0}")]
    Capacity(String),
    /// Malformed serialized input.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
