//! Federated training of an input-conditioned soft-prompt generator in front
//! of a frozen transformer encoder, with client-side unlearning and an
//! experiment harness.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors and reverse-mode gradients
//! - [`encoder`]: the frozen backbone classifier
//! - [`generator`]: the prompt generator, its loss and update rule
//! - [`data`]: synthetic tasks, Bayes oracle, padding and JSON-lines I/O
//! - [`federation`]: partitioning, selection, local training, aggregation
//! - [`unlearning`]: relabel-based forgetting and server replacement
//! - [`harness`]: config-driven experiments and metrics export

pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod federation;
pub mod generator;
pub mod harness;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod unlearning;

pub use error::{Error, Result};
