use alloc::string::String;
use core::fmt;

/// Error classes shared across the crate. Each carries a human readable detail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes or dimensions do not agree.
    Shape(String),
    /// A non-finite value or a value outside its valid domain.
    Numeric(String),
    /// Invalid configuration or an unsatisfiable request.
    Config(String),
    /// Malformed token sequence or input layout.
    Format(String),
}

impl Error {
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
        }
    }

    pub fn detail(&self) -> &str {
        match self {
            Error::Shape(s) | Error::Numeric(s) | Error::Config(s) | Error::Format(s) => s,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.class(), self.detail())
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(alloc::format!($($arg)*)) };
}
macro_rules! numeric_err {
    ($($arg:tt)*) => { $crate::error::Error::Numeric(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, format_err, numeric_err, shape_err};
