//! Speed-bump detection from smartphone inertial sensor windows.
//!
//! The crate implements the full pipeline around a TCN+BiLSTM binary
//! classifier ("ETLNet"): a minimal dense-tensor core, forward/backward
//! passes for every layer, declarative model assembly for the base network
//! and its ablation variants, a CSV ingestion and windowing pipeline, a
//! deterministic synthetic trace generator, Adam training with the usual
//! binary-classification metrics, and a sweep/ablation experiment harness.
//! The `etlnet` binary exposes all of it on the command line.
//!
//! Everything is seeded: identical seeds reproduce identical runs
//! (bit-for-bit in extended precision).

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod dataio;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
