//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has (near-)zero norm")]
    ZeroVector,

    #[error("requested top-{requested} but only {available} candidates")]
    InsufficientCandidates { requested: usize, available: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("forward cache does not match this model")]
    StaleCache,

    #[error("label {label} out of range (num identities = {num_identities})")]
    LabelOutOfRange { label: u32, num_identities: usize },

    #[error("identity {identity} has no samples")]
    EmptyIdentity { identity: u32 },

    #[error("need at least {needed} identities, have {available}")]
    InsufficientIdentities { needed: usize, available: usize },

    #[error("feature bank used before initialization")]
    UninitializedBank,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("not enough {kind} pairs: requested {requested}, available {available}")]
    InsufficientPairs {
        kind: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("score list is empty")]
    EmptyScores,

    #[error("no gallery entry for identity {identity}")]
    MissingGalleryEntry { identity: u32 },

    #[error("index {index} out of range (len = {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("embedding dimensions differ: teacher {teacher} vs student {student}")]
    DimMismatch { teacher: usize, student: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated mid-payload")]
    TruncatedFile,

    #[error("config error: {0}")]
    Config(String),

    #[error("no metrics found: {0}")]
    MissingMetrics(String),

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
