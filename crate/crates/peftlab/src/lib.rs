//! peftlab: a desk-scale laboratory for parameter-efficient fine-tuning.
//!
//! The crate trains nothing larger than a miniature decoder-only language
//! model, on purpose: every mechanism — reverse-mode autodiff, bottleneck
//! adapters, Kronecker-factored (PHM) adapters, low-rank (LoRA) deltas,
//! fusion attention over frozen adapters, and adversarial two-phase fusion
//! training — is small enough to verify against hand-computed values, yet
//! wired together exactly like its full-scale counterpart.
//!
//! Module map:
//! * [`tensor`] — flat `f64` tensors with a backward pass.
//! * [`corpus`] — JSONL sample corpora, vocabulary, encoding, synthesis.
//! * [`backbone`] — the frozen miniature transformer and its plugin slots.
//! * [`peft`] — the three adapter families and parameter accounting.
//! * [`fusion`] — attention over adapter outputs, with maskable entries.
//! * [`train`] — Adam, the three training modes, and event logging.
//! * [`checkpoint`] — versioned, checksummed named-tensor files.
//! * [`metrics`] — smoothed BLEU-4, ROUGE-L, token precision/recall/F1.
//! * [`attnlab`] — aggregation and export of fusion attention traces.
//! * [`config`] — run configuration files and their validation.

pub mod attnlab;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
