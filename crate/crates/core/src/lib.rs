//! Capsule-network library: a self-contained tensor/autodiff core, two
//! routing-by-agreement procedures (consistency-weighted and the baseline
//! dot-product rule), the capsule classifier built from them, IDX dataset
//! ingestion, and a deterministic training loop.
//!
//! Modules:
//! - [`tensor`] — dense tensors with reverse-mode autodiff
//! - [`routing`] — squash, logit initialization, and both routing rules
//! - [`model`] — the two-conv + class-capsule architecture and margin loss
//! - [`data`] — IDX parsing, splits, deterministic batching
//! - [`train`] — run configuration, optimizers, training/evaluation/sweeps
//! - [`checkpoint`] — bit-exact binary parameter snapshots
//! - [`verify`] — independent scalar oracles and a finite-difference checker

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod routing;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Dtype, Real, Tensor};
