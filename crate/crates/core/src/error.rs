//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or graph shape inconsistency. The message names the offending
    /// node or operand.
    #[error("shape error: {0}")]
    Shape(String),

    /// Graph construction or evaluation problem (unbound leaf, non-scalar
    /// seed, unknown name, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// Text input (CSV / JSON) that does not parse or violates an invariant.
    /// Carries a 1-based line number where one is meaningful.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Domain-level validation failure (config out of range, spectrum not
    /// covering a band, dataset missing a class, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Binary container problems: bad magic, truncated payload, version
    /// mismatch, out-of-range values.
    #[error("format error: {0}")]
    Format(String),

    /// A generator or sampler exhausted its retry budget.
    #[error("retry budget exhausted: {0}")]
    RetryBudget(String),

    /// Training or optimization aborted (NaN loss, degenerate dataset).
    #[error("run aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
