use thiserror::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by inference, corpus handling and the async engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Two values that must share a shape do not.
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    /// A configuration value is outside its valid range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An update drove a global parameter entry out of its domain.
    /// Carries the offending (row, column) index so the failure is
    /// attributable; entries are never silently clamped.
    #[error("numerical divergence: entry ({row}, {col}) became {value} at iteration {iteration}")]
    Divergence {
        row: usize,
        col: usize,
        value: f64,
        iteration: u64,
    },

    /// An operation was called with arguments that cannot be meaningful
    /// (empty batch, mismatched lengths, incomparable runs).
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric input is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed corpus input, with the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A word id in the corpus exceeds the declared vocabulary size.
    #[error("word id {word_id} out of range (vocabulary size {vocab_size}) at line {line}")]
    WordIdOutOfRange {
        line: usize,
        word_id: usize,
        vocab_size: usize,
    },

    /// The drop policy discarded so many stale gradients in a row that the
    /// master cannot make progress.
    #[error(
        "staleness starvation at iteration {iteration}: {consecutive_drops} consecutive gradients \
         exceeded the staleness bound"
    )]
    StalenessStarvation {
        iteration: u64,
        consecutive_drops: u64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
