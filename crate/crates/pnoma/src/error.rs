//! Crate-wide error type.
//!
//! Errors are grouped into three classes so that callers (notably the CLI)
//! can map failures onto distinct exit codes: configuration/usage problems,
//! data/format problems, and numeric failures detected at run time.

use thiserror::Error;

/// Coarse failure class, used by front ends to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid configuration, arguments, or API misuse.
    Usage,
    /// Missing or malformed data files and serialized artifacts.
    Data,
    /// Non-finite values, degenerate inputs, or failed numeric checks.
    Numeric,
}

/// Unified error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Rejected configuration value or inconsistent parameter combination.
    #[error("config error: {0}")]
    Config(String),

    /// Problem reading, writing, or parsing a data artifact.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure inside an operation (NaN, infinity, degenerate input).
    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// Tensor shape mismatch; carries the operation that rejected it.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: String, detail: String },

    /// Misuse of the computation graph (non-scalar root, double backward, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// A builder closure produced different results on repeated calls.
    #[error("determinism violation: {0}")]
    Determinism(String),

    /// Underlying I/O failure, wrapped so the caller keeps the path context.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Helper for numeric failures: names the offending operation.
    pub fn numeric(op: &str, detail: impl Into<String>) -> Self {
        Error::Numeric { op: op.to_string(), detail: detail.into() }
    }

    /// Helper for shape mismatches.
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape { op: op.to_string(), detail: detail.into() }
    }

    /// Which coarse class this error belongs to.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Data(_) | Error::Io(_) => ErrorClass::Data,
            Error::Numeric { .. }
            | Error::Shape { .. }
            | Error::Graph(_)
            | Error::Determinism(_) => ErrorClass::Numeric,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
