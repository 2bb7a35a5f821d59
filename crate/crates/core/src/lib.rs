//! Document-level multimodal sarcasm understanding.
//!
//! The crate covers the whole pipeline for detecting sarcasm in news
//! document/image pairs and localizing its clues:
//!
//! * [`data`]: record schema, JSONL ingestion, deterministic splits and
//!   synthetic fixtures.
//! * [`annotation`]: inter-annotator similarity and confidence-based
//!   selection of the canonical annotation.
//! * [`text`]: token embeddings and the square document matrix.
//! * [`vision`]: resolution-preserving conv stack, patch projection and
//!   window partitioning.
//! * [`model`]: additive fusion, shifted-window backbone, task heads,
//!   losses, training and checkpoints.
//! * [`metrics`]: EM/EM50/EM70, BitError, AP, F1 and detection metrics.
//! * [`cli`]: the `docmsu` command-line entry point.

pub mod annotation;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
mod nn;
pub mod text;
pub mod viz;
pub mod vision;

pub use error::{Error, Result};
