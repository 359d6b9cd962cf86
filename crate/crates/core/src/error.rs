//! Error types shared across the crate.

use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    Shape(String),
    /// An API was used outside its contract (consumed tape, length mismatch, ...).
    Usage(String),
    /// A computation produced or encountered non-finite values.
    Numeric(String),
    /// Invalid configuration value or unknown key.
    Config(String),
    /// A probability distribution violated its invariants.
    Distribution(String),
    /// Data partitioning could not satisfy its constraints.
    Partition(String),
    /// Malformed input file (line number included when known).
    Parse { line: usize, message: String },
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Distribution(m) => write!(f, "distribution error: {m}"),
            Error::Partition(m) => write!(f, "partition error: {m}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
