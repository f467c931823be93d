//! Question-guided multi-source question answering with sparse
//! mixture-of-experts routing, implemented from scratch on an f64
//! reverse-mode autodiff core.
//!
//! The library covers the full pipeline at desk scale:
//!
//! - [`tensor`] / [`tape`] / [`optim`]: dense tensors, a dynamic autodiff
//!   tape, Adam, and the step learning-rate schedule.
//! - [`blocks`]: multi-head attention and pre-norm encoder/decoder blocks.
//! - [`encoders`]: the three unshared source encoders (question, context,
//!   image with patch tiling).
//! - [`fusion`]: question-guided per-token source weighting and the
//!   question-source cosine alignment losses.
//! - [`moe`]: expert networks, noisy top-k gating, routing statistics, the
//!   load-balancing auxiliary loss, and placement/freezing machinery.
//! - [`model`] / [`train`]: end-to-end assembly, the joint objective,
//!   teacher-forced training, and greedy generation with confidences.
//! - [`data`]: a deterministic multi-source QA generator where the true
//!   answer source is known by construction.
//! - [`metrics`]: exact match accuracy and precision-thresholded recall.
//! - [`checkpoint`] / [`config`] / [`gradcheck`] / [`ablate`] / [`cli`]:
//!   persistence, run configuration, finite-difference verification, the
//!   ablation grid, and the command-line surface.
//!
//! See the crate `examples/` directory for one runnable walkthrough per
//! capability.

pub mod ablate;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{NodeId, Tape};
pub use tensor::{Parameter, Tensor, TensorError};
