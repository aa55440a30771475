//! Crate-wide error type.
//!
//! Errors are grouped so callers (in particular the CLI) can map them onto
//! coarse failure categories: taxonomy/data problems are recoverable input
//! errors, while [`Error::NonFinite`] signals numerical failure inside an
//! otherwise valid run.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed taxonomy source (syntax, duplicate names, bad edges, ...).
    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    /// Malformed or inconsistent dataset input (shapes, unknown names, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration value (negative temperature, bad fractions, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Shape mismatch between model parameters, taxonomy and features.
    #[error("shape error: {0}")]
    Shape(String),

    /// A loss, probability or gradient became NaN or infinite.
    #[error("numerical error: {0}")]
    NonFinite(String),

    /// Malformed binary payload (bad magic, version, truncation, ...).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for a format violation in the file at `path`.
    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
