//! Unit-norm constrained SGD for batch-normalized feedforward networks.
//!
//! Each hidden layer of the network is `linear -> batch norm -> ReLU -> 2x1 max-pool`,
//! topped by a softmax classifier. Batch normalization makes the training loss
//! invariant to positive rescaling of every filter (row) of a layer weight matrix,
//! so the filters only matter up to their direction. This crate keeps the filters
//! on the oblique manifold (every row unit-norm) and trains them with the
//! project-step-retract update, next to a plain Euclidean SGD baseline.
//!
//! The crate is `no_std` and only needs `alloc`. Reading files, writing artifacts
//! and the command-line driver live in the companion `unitnorm` crate.
//!
//! Module map:
//!
//! - [`numerics`]: dense row-major `f64` matrices.
//! - [`manifold`]: tangent projection, retraction and the unit-norm step.
//! - [`network`]: forward and backward passes, loss and gradients.
//! - [`symmetry`]: row-scaling reparameterizations and the invariance measurements.
//! - [`optimizer`]: the two update rules, bold driver, stopping rules and the
//!   multi-run training protocol.
//! - [`data`]: labelled image sets, train/validation splits and mini-batching.
//! - [`check`]: the self-contained property suite behind `unitnorm check`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod check;
pub mod data;
mod error;
pub mod manifold;
pub(crate) mod math;
pub mod network;
pub mod numerics;
pub mod optimizer;
pub mod symmetry;

pub use error::{Error, Result};
pub use manifold::ObliquePoint;
pub use network::{Gradients, Mode, NetworkConfig, NetworkParams};
pub use numerics::Matrix;
pub use optimizer::{RunResult, TrainConfig, UpdateRule};

/// Deterministic generator used everywhere a seed is taken.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the generator for `seed`, on an independent `stream`.
///
/// Streams let one seed fan out into several non-overlapping generators
/// (one per learning-rate candidate, one per run phase) without ad hoc seed arithmetic.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
