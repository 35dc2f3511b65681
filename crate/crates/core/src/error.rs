//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by dataset handling, training and analysis code.
///
/// Shape mismatches always carry both shapes so the message is actionable
/// without a debugger.
#[derive(Debug)]
pub enum Error {
    /// Two operands had incompatible shapes.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A non-finite value appeared where a finite one is required.
    NonFinite { what: String },
    /// The caller violated an API precondition.
    Usage(String),
    /// A config file or experiment description is invalid.
    Config(String),
    /// A cell in a CSV file could not be parsed.
    Parse { row: usize, col: usize, msg: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "shape mismatch in {op}: left is {}x{}, right is {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse { row, col, msg } => {
                write!(f, "parse error at row {row}, column {col}: {msg}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
