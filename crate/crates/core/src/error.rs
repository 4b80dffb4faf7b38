//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Numerical
//! contract violations (non-finite values, degenerate denominators)
//! are surfaced as errors rather than silently propagated.

use std::fmt;

/// Errors produced by tensor, kernel, model and I/O operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Extent/shape disagreement between operands.
    Shape(String),
    /// NaN or infinity encountered where finite values are required.
    NonFinite(String),
    /// A resource guard (size ceiling, divisibility, range) was violated.
    Guard(String),
    /// Invalid configuration value.
    Config(String),
    /// Malformed text or binary input.
    Parse(String),
    /// Filesystem trouble; carries the underlying description.
    Io(String),
    /// A denominator fell below the epsilon guard.
    Degenerate(String),
    /// Training loss exploded past the abort threshold.
    Diverged(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Guard(m) => write!(f, "guard violated: {m}"),
            Error::Config(m) => write!(f, "invalid config: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate denominator: {m}"),
            Error::Diverged(m) => write!(f, "training diverged: {m}"),
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
