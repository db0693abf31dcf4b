//! Total activation classifiers.
//!
//! A total activation classifier (TAC) slices the activations of several
//! layers of a network into contiguous groups, sums each group, and
//! concatenates the sums into an *activation profile*. Every class owns a
//! fixed random binary code of the same length; training pulls profiles
//! toward the code of the correct class, and prediction picks the nearest
//! code. The distance to that code doubles as a confidence score for
//! rejection, error detection and out-of-distribution detection.
//!
//! Crate layout:
//!
//! - [`autodiff`]: dense `f64` tensors and a tape-based reverse-mode engine.
//! - [`codebook`]: random class codes and profile-to-code distances.
//! - [`profile`]: slice/reduce, profile assembly, projection stacks.
//! - [`losses`]: binary and distance-softmax objectives, Mixup.
//! - [`model`]: architectures, TAC models, optimizers, training, checkpoints.
//! - [`metrics`]: ROC/AUROC, detection rate at EER, value curves, heatmaps.
//! - [`data`]: IDX loading, synthetic blobs, splits, batching.

pub mod autodiff;
pub mod codebook;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod profile;
pub mod rng;

pub use error::{Error, Result};
