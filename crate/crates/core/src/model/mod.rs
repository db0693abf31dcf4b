//! Base networks, TAC models in both modes, optimizers, training and checkpoints.

mod arch;
mod checkpoint;
mod optim;
mod tac;
mod train;

pub use arch::{Activation, Architecture, BaseClassifier, BaseForward, LayerSpec};
pub use checkpoint::{params_checksum, BaseCheckpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{OptimizerConfig, OptimizerState};
pub use tac::{score_profiles, AddonSpec, BoundParams, Scope, ScoredPrediction, Strategy, TacMode, TacModel, Tap};
pub use train::{capacity_test, fit, fit_addon, fit_base, fit_with, CapacityPoint, EpochLog, TrainConfig, TrainLog};

use crate::autodiff::Tensor;
use crate::rng::SplitMix64;

/// Uniform weights in `[-b, b]` with `b = sqrt(6 / fan_in)`.
pub fn init_weight(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}
