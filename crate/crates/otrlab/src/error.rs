//! Crate-wide error type.
//!
//! A single enum keeps error propagation simple across module boundaries and
//! lets the CLI map every failure onto a small set of process exit codes.

use std::fmt;
use std::io;

/// All failure modes surfaced by the crate.
#[derive(Debug)]
pub enum Error {
    /// A tensor operation was applied to incompatible shapes.
    Shape(String),
    /// Misuse of an autodiff graph (mixed graphs, repeated backward,
    /// non-scalar loss, ...).
    Autodiff(String),
    /// An argument violated a documented precondition.
    InvalidInput(String),
    /// A character outside the vocabulary, with its position in the input.
    UnknownSymbol { symbol: char, index: usize },
    /// A malformed corpus line, with its 1-based line number.
    Corpus { line: usize, message: String },
    /// A checkpoint could not be written or read back faithfully.
    Checkpoint(String),
    /// An invalid run configuration; the message names the offending field.
    Config(String),
    /// Training produced a non-finite loss and aborted.
    NonFinite { step: usize, batch: Vec<usize> },
    /// An underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Autodiff(msg) => write!(f, "autodiff error: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::UnknownSymbol { symbol, index } => {
                write!(f, "unknown symbol {symbol:?} at character index {index}")
            }
            Error::Corpus { line, message } => write!(f, "corpus line {line}: {message}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::NonFinite { step, batch } => write!(
                f,
                "non-finite loss at step {step} (batch examples {batch:?}); aborting"
            ),
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

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_names_symbol_and_index() {
        let err = Error::UnknownSymbol { symbol: '@', index: 3 };
        let msg = err.to_string();
        assert!(msg.contains("'@'"), "message should quote the symbol: {msg}");
        assert!(msg.contains('3'), "message should contain the index: {msg}");
    }

    #[test]
    fn display_names_corpus_line() {
        let err = Error::Corpus { line: 17, message: "missing field `response`".into() };
        assert!(err.to_string().contains("line 17"));
    }

    #[test]
    fn non_finite_reports_step_and_batch() {
        let err = Error::NonFinite { step: 42, batch: vec![1, 5, 9] };
        let msg = err.to_string();
        assert!(msg.contains("step 42"));
        assert!(msg.contains('5'));
    }
}
