//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by model construction, fusion and the benchmark harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input (shape mismatches, non-finite values, bad config).
    #[error("input error: {0}")]
    Input(String),

    /// A linear-algebra or floating-point step failed to produce a usable value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An operation was called on a value that does not support it.
    #[error("usage error: {0}")]
    Usage(String),

    /// A metric is undefined for the given data.
    #[error("metric error: {0}")]
    Metric(String),

    /// The quadrature oracle could not resolve the requested density.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// A persisted artifact has an unsupported format version.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {message}")]
    Csv { path: String, message: String },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
