//! Desk-scale video in-context learning.
//!
//! The pipeline: generate synthetic sprite videos with known action
//! semantics ([`worldgen`]), learn a patch codebook and tokenize frames
//! ([`tokenizer`]), train a causal decoder on next-token prediction
//! ([`model`], [`trainer`]), then prepend demonstration clips at inference
//! time and measure how strongly generated continuations follow the
//! demonstrated semantics ([`inference`], [`eval`], [`analysis`]).
//!
//! See the crate examples for one runnable entry point per capability, and
//! the `vicl` binary for the config-driven experiment lifecycle.

pub mod analysis;
pub mod error;
pub mod eval;
pub mod inference;
pub mod math;
pub mod model;
pub mod run;
pub mod seeds;
pub mod textcond;
pub mod tokenizer;
pub mod trainer;
pub mod util;
pub mod worldgen;

pub use error::{Error, Result};
