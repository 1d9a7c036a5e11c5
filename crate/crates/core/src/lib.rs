//! Protest detection toolkit.
//!
//! Builds protest / non-protest corpora from event records and article
//! archives, trains a sliding-window-attention document classifier and a
//! shifted-window image classifier on a small reverse-mode autodiff engine,
//! and runs evaluation and inference from serialized checkpoints.
//!
//! Batch work (per-example gradients, evaluation, inference) fans out over
//! independent graphs through [`parallel::Execution`]; the `parallel` feature
//! enables the rayon backend, otherwise everything runs sequentially.

pub mod corpus;
pub mod error;
pub mod parallel;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};

/// Version string written into manifests and checkpoint headers.
pub const TOOL_VERSION: &str = concat!("protestlens ", env!("CARGO_PKG_VERSION"));
