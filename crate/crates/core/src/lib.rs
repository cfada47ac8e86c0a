//! Desk-scale violence recognition pipeline.
//!
//! The crate is organised around a small static compute graph
//! ([`graph::ModelGraph`]) that every other subsystem consumes:
//!
//! - [`blocks`] — ghost convolutions, CSP-style ghost bottlenecks and EMA
//!   attention, plus the builders that assemble them into graphs;
//! - [`graph::cost`] — analytic parameter / FLOP accounting for those graphs;
//! - [`detector`] — a single-class anchor-free person detector with NMS and
//!   detection metrics;
//! - [`pruner`] — dependency-aware structured channel pruning driven by
//!   per-channel L2 importance, with fine-tuning;
//! - [`tsn`] — segment sampling, snippet encoding and consensus
//!   classification for clip-level labels;
//! - [`pipeline`] — detect → crop → classify integration producing a verdict
//!   per clip;
//! - [`data`] / [`train`] / [`report`] — synthetic dataset generators,
//!   training loops and the ablation/report harness behind the CLI.
//!
//! All tensor math is `f64` with fixed reduction orders, so results are
//! bit-reproducible for a given seed whether or not the `parallel` feature
//! (rayon data parallelism, on by default) is enabled.

pub mod blocks;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod graph;
pub mod pipeline;
pub mod pruner;
pub mod report;
pub mod tensor;
pub mod train;
pub mod tsn;

mod parallel;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorSpec};
