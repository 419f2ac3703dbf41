//! One error enum for the whole crate. Variants carry enough context to
//! tell a caller what to fix; they are matched on in tests and by the CLI
//! when mapping failures to exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: dimension mismatch ({detail})")]
    Dim {
        context: &'static str,
        detail: String,
    },

    #[error("{context}: non-finite input")]
    NonFinite { context: &'static str },

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("{context}: invalid argument ({detail})")]
    InvalidArg {
        context: &'static str,
        detail: String,
    },

    #[error("{context}: need at least {need} samples, got {got}")]
    InsufficientSamples {
        context: &'static str,
        need: usize,
        got: usize,
    },

    #[error("domain {domain} has {count} samples; the Stein estimator needs at least 2")]
    DomainTooSmall { domain: u16, count: usize },

    #[error("degenerate batch: every anchor has an empty positive or negative set")]
    DegenerateBatch,

    #[error("batch is missing embeddings for level {level}")]
    MissingLevel { level: usize },

    #[error("{context}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("bad magic: expected \"MSD1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found}")]
    UnsupportedVersion { found: u32 },

    #[error("corrupt file: {detail}")]
    Corrupt { detail: String },

    #[error("{kind} label {value} out of range (max {max})")]
    LabelOutOfRange {
        kind: &'static str,
        value: u32,
        max: u32,
    },

    #[error("non-finite gradient in {context}; training diverged")]
    NonFiniteGradient { context: String },

    #[error("checkpoint mismatch: {detail}")]
    CheckpointMismatch { detail: String },

    #[error("config schema violation: {detail}")]
    Schema { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
