//! Image-to-point-cloud contrastive pre-training at desk scale.
//!
//! The pipeline mirrors a camera-to-lidar knowledge transfer setup end to
//! end, but every stage is small enough to test exhaustively on a laptop:
//!
//! * [`synth`] generates a fully synthetic scene: a handful of lidar sweeps
//!   over ground-plane-plus-boxes geometry, one camera image whose per-pixel
//!   semantic features stand in for a frozen vision-language backbone, and a
//!   bank of per-class text embeddings.
//! * [`geom`] provides the rigid-transform, pinhole-projection, multi-sweep
//!   registration, and voxel-grid machinery the rest of the crate builds on.
//! * [`pairs`] projects registered points into the image to build
//!   pixel-point correspondences and lifts pixel labels onto points.
//! * [`losses`] implements the training objectives: a class-partitioned
//!   InfoNCE over point-text pairs, an attention-fused spatio-temporal
//!   consistency loss over grid cells, and a KL feature-distillation
//!   baseline. All gradients are analytic and finite-difference checked.
//! * [`model`] is a small per-point MLP encoder with two projection heads
//!   and plain SGD with a cosine learning-rate schedule.
//! * [`trainer`] runs the pre-training loop, including label switching from
//!   pixel supervision to the model's own predictions mid-run.
//! * [`eval`] scores checkpoints by zero-shot transfer and by a
//!   label-efficient fine-tuning probe.
//! * [`config`] parses the flat `key = value` files the CLI consumes.
//!
//! Everything is deterministic given a seed: fixed-stream RNGs, canonical
//! iteration orders, and sequential reductions throughout.

pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod pairs;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
