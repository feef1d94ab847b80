//! Crate-wide error and result types.

/// Convenience alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or vector did not have the shape an operation requires.
    /// The message names the operation and the expected vs actual extents.
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    /// A configuration value is outside its documented domain.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data violates a precondition (empty stream, bad label, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// A numerical guarantee failed (non-finite value, degenerate statistic).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An archive or segment file is structurally malformed.
    #[error("malformed file: {0}")]
    Format(String),

    /// An archive decoded cleanly but its checksum does not match.
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    /// A file was written by an incompatible version or for a different
    /// model configuration than the one being loaded into.
    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
