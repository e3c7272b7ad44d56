//! Desk-scale reference implementation of the MiniVLM vision-language
//! pipeline.
//!
//! The crate has five working parts:
//!
//! - [`detector`]: a compact two-stage region feature extractor (scaled
//!   inverted-bottleneck backbone, bidirectional feature pyramid, tiny
//!   proposal head, per-region head producing features, classes and tags);
//! - [`fusion`]: a BERT-shaped fusion transformer over sentence tokens,
//!   object tags and region features, with task-dependent attention masks;
//! - [`pretrain`]: masked-token and pair-match objectives, corpus ingestion
//!   with pluggable caption/tag providers, and a training step;
//! - [`heads`]: captioning, answer classification, pair reasoning and
//!   retrieval on top of the fusion encoder;
//! - [`cost`]: an analytical parameter/FLOP model over the same configs that
//!   build the live networks, plus reconstructions of published baselines.
//!
//! The [`harness`] module adds experiment configs, benchmarks and
//! reference-table reproduction used by the command-line tool.
//!
//! Everything is deterministic under explicit seeds; all numerics are f64 on
//! the CPU. Networks here are meant for verification and small-scale
//! experiments, not throughput.

pub mod config;
pub mod cost;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod heads;
pub mod nn;
pub mod pretrain;

pub use config::ArchConfig;
pub use error::{Error, Result};
