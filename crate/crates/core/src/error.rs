use thiserror::Error;

/// Errors raised while building or running a neck.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration document could not be read or parsed.
    #[error("config parse error: {0}")]
    ConfigParse(String),
    /// The requested architecture is invalid (level counts, widths, factors).
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor shapes do not satisfy an operator's contract.
    #[error("shape error: {0}")]
    Shape(String),
    /// A NaN or infinity was produced, or a numeric precondition failed.
    #[error("numeric error at {node}: {detail}")]
    Numeric { node: String, detail: String },
    /// The API was used incorrectly (e.g. backward from a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),
    /// A tensor file is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use shape_err;
