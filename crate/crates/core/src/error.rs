//! Error types shared across the engine.

use thiserror::Error;

/// Low-level failure while decoding a feature pack or checkpoint container.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PackErrorKind {
    #[error("bad magic (expected {expected:?})")]
    BadMagic { expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?} has dim {got}, pack dim is {expected}")]
    DimMismatch { id: String, expected: u32, got: u32 },
    #[error("record {id:?} has zero rows or zero dim")]
    EmptyRecord { id: String },
    #[error("record {id:?} contains a non-finite value")]
    NonFinite { id: String },
    #[error("record id is not valid UTF-8")]
    BadId,
    #[error("{trailing} trailing bytes after last record")]
    TrailingBytes { trailing: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    /// Two feature matrices disagree on the shared-space dimensionality.
    #[error("feature dim mismatch: query dim {query} vs context dim {context}")]
    DimMismatch { query: usize, context: usize },

    /// An operation received an argument of the wrong shape.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is outside its documented range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Binary container decode failure, with the byte offset of the fault.
    #[error("pack parse error at byte {offset}: {kind}")]
    Pack { offset: u64, kind: PackErrorKind },

    /// Manifest cross-reference validation failure; lists every offender.
    #[error("manifest validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// An id was not found in the relevant pack or dataset.
    #[error("unknown id {0:?}")]
    UnknownId(String),

    /// A gradient turned non-finite during optimization.
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
