//! Learning with noisy labels by coarse-to-fine sample credibility.
//!
//! Two peer networks are trained together. Each mini-batch is split by the
//! small-loss criterion; the likely-clean part is trained with per-sample
//! credibility weights taken from a sliding window of mixture-model posteriors,
//! and the likely-noisy part has its labels treated as learnable soft
//! distributions.

pub mod cli;
pub mod config;
pub mod credibility;
pub mod data;
pub mod error;
pub mod labelstore;
pub mod losses;
pub mod mixture;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
