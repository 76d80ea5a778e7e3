//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or sequence dimensions disagree with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A face partition is not a valid disjoint cover of the coefficient set,
    /// or an index list points outside the coefficient range.
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    /// Data fails an invariant (non-finite values, out-of-range labels, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A binary container has a bad magic, version, or truncated payload.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration values are inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A sequence is longer than the configured maximum.
    #[error("length error: sequence length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    /// Training produced a non-finite loss; diagnostics attached.
    #[error("numerical abort: {0}")]
    Numeric(String),

    /// Dataset directories are not paired one-to-one by id.
    #[error("unpaired sequence ids: {0:?}")]
    MissingPair(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 0 success, 1 validation/config error, 2 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
