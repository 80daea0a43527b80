//! Error type shared across the crate.
//!
//! The variants map onto how callers should react: `Contract` is a caller
//! bug (bad shapes or arguments), `Domain` is a math-domain violation,
//! `Numerical` is a runtime numerical failure (non-finite values, failed
//! factorization, diverged training), and `Validation` is malformed input
//! data or configuration.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// An API was called with arguments that violate its contract.
    Contract(String),
    /// A math operation was applied outside its domain (e.g. log of a
    /// negative number).
    Domain(String),
    /// A numerical failure at runtime: non-finite intermediate values,
    /// failed Cholesky factorization, diverged optimization.
    Numerical(String),
    /// Malformed input data or configuration.
    Validation(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
