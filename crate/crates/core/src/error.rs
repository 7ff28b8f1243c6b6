use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value lies outside the domain of an operation (e.g. sqrt of a negative).
    #[error("domain error: {0}")]
    Domain(String),

    /// The API was used incorrectly (non-scalar loss, foreign tape handle, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// An op produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Input data violates a documented contract (unnormalized DOS, length mismatch, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Correlation is undefined because one input is constant.
    #[error("correlation undefined: {0} input is constant")]
    ConstantInput(&'static str),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: [u8; 8] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingData { expected: u64, actual: u64 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
