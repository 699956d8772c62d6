//! Crate-wide error type.
//!
//! One enum covers all failure modes so errors compose across modules
//! (a training run can surface a tensor shape error, a checkpoint
//! checksum error, or a corpus format error through the same `Result`).

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ── tensor / autodiff ──────────────────────────────────────────────
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value (overflow or NaN)")]
    NonFinite { op: &'static str },

    #[error("{op}: axis {axis} is not valid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    // ── model / adapters ───────────────────────────────────────────────
    #[error("model config invalid: {0}")]
    ModelConfig(String),

    #[error("sequence of length {len} exceeds the maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence where at least one token is required")]
    EmptySequence,

    #[error("adapter setup invalid: {0}")]
    AdapterConfig(String),

    #[error("fusion setup invalid: {0}")]
    FusionConfig(String),

    // ── corpus ─────────────────────────────────────────────────────────
    #[error("{path}:{line}: {msg}")]
    CorpusFormat {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("corpus is empty: {0}")]
    EmptyCorpus(String),

    #[error("vocabulary build failed: {0}")]
    Vocab(String),

    // ── checkpoints ────────────────────────────────────────────────────
    #[error("checkpoint {path}: not a checkpoint file (bad magic)")]
    CheckpointMagic { path: String },

    #[error("checkpoint {path}: unsupported format version {version}")]
    CheckpointVersion { path: String, version: u32 },

    #[error("checkpoint {path}: manifest corrupt: {msg}")]
    CheckpointManifest { path: String, msg: String },

    #[error("checkpoint {path}: payload checksum mismatch (file is corrupt or was tampered with)")]
    CheckpointChecksum { path: String },

    #[error("checkpoint {path}: missing tensor group `{group}`")]
    CheckpointMissingGroup { path: String, group: String },

    #[error("checkpoint {path}: tensor `{name}` inconsistent: {msg}")]
    CheckpointTensor {
        path: String,
        name: String,
        msg: String,
    },

    // ── training ───────────────────────────────────────────────────────
    #[error("training aborted at step {step}: {msg}")]
    TrainAbort { step: usize, msg: String },

    #[error("training plan invalid: {0}")]
    TrainPlan(String),

    // ── analysis / metrics ─────────────────────────────────────────────
    #[error("attention analysis: {0}")]
    Analysis(String),

    // ── configuration / CLI ────────────────────────────────────────────
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that indicate a bad invocation or bad configuration
    /// (CLI exit code 2) rather than a failure at run time (exit code 3).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::TrainPlan(_)
                | Error::ModelConfig(_)
                | Error::AdapterConfig(_)
                | Error::FusionConfig(_)
        )
    }
}
