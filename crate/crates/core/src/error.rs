use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A NaN or infinity was produced or supplied at an operator boundary.
    NonFinite { context: String },
    /// Argument outside the documented domain of an operation.
    InvalidArgument(String),
    /// Underlying I/O failure (message of the std error).
    Io(String),
    /// On-disk artifact malformed: bad magic, truncation, checksum, version.
    Format(String),
    /// Config file problem; `line` is 1-based when known.
    Config { line: Option<usize>, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config { line: Some(l), message } => write!(f, "config error (line {l}): {message}"),
            Error::Config { line: None, message } => write!(f, "config error: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch { op, detail: detail.into() }
}
