//! Deterministic simulator for multi-client split learning.
//!
//! The crate covers a small neural-network engine that can be executed on
//! either side of a cut layer, dataset synthesis and client partitioning,
//! the training orchestrators (vanilla and round-robin SL, SFL, mSL, P-SL and
//! its parallel and cache-based variants), a model-inversion attack harness
//! and the leakage/utility metrics used to score runs.

pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod presets;
pub mod protocol;
pub mod seed;

pub use error::{Error, Result};
