use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand dimensions do not conform.
    #[error("shape error: {0}")]
    Shape(String),
    /// Input is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A non-finite value appeared during an iterative computation.
    #[error("numeric error at step {step}: {msg}")]
    Numeric { step: usize, msg: String },
    /// An API was driven in an order it does not support.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
pub(crate) use domain_err;
pub(crate) use shape_err;
