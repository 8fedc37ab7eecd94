//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide error enum.
///
/// The variants map onto the CLI exit codes: `Format` and `Data` (and I/O)
/// are problems with user-supplied files or values (exit 2), `Dim`, `Arg`
/// and `Contract` are violations of an operation's calling contract (exit 3
/// when they surface from internal self-checks).
#[derive(Debug)]
pub enum Error {
    /// Shape mismatch between tensors; the message names both shapes.
    Dim(String),
    /// Invalid argument value (out-of-range rate, lo >= hi, empty input, ...).
    Arg(String),
    /// Input data violates a documented invariant (non-monotone timestamps,
    /// a single-class window set, an empty split side, ...).
    Data(String),
    /// A file does not conform to its documented format.
    Format(String),
    /// A cache or state object was used outside its valid lifetime
    /// (stale conv cache, eval-mode cache passed to a backward pass).
    Contract(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Arg(m) => write!(f, "argument error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code for the CLI: data/format problems are 2, contract
    /// and shape violations are 3 (internal invariant), I/O is 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Format(_) | Error::Arg(_) | Error::Io(_) => 2,
            Error::Dim(_) | Error::Contract(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
