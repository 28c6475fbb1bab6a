//! Core algorithms for label-efficient semantic segmentation experiments.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! procedural scene generation, a small differentiable encoder-decoder,
//! cross-entropy and regional contrastive losses, per-pixel label
//! provenance bookkeeping, entropy-ranked region queries, IoU metrics and
//! the train/pseudo-label/query loop that ties them together. File
//! formats, PNG/CSV serialization and the command-line interface live in
//! the companion `segal` crate.
//!
//! The crate is `no_std` (with `alloc`); all transcendental math goes
//! through `libm` so results are bit-identical across platforms.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod alquery;
pub mod config;
pub mod error;
pub mod labelpool;
pub mod losses;
pub mod metrics;
pub mod orchestrator;
pub mod seeding;
pub mod segmodel;
pub mod synthdata;

pub use config::ExperimentConfig;
pub use error::{CoreError, Result};
