//! Differentiable Bayesian filtering for multimodal state estimation.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode engine over dense f64 tensors.
//! - [`blocks`]: stochastic MLPs, embeddings, attention, sensor encoders,
//!   decoder and auxiliary lifter.
//! - [`filters`]: the attention-gain filter, the differentiable ensemble
//!   Kalman filter and a differentiable EKF.
//! - [`fusion`]: feature, unimodal and crossmodal fusion baselines.
//! - [`sim`]: a synthetic planar arm producing image, depth and
//!   proprioception streams.
//! - [`estimator`]: one interface over every filter for rollouts.
//! - [`train`] and [`eval`]: training curriculum, checkpoints and
//!   experiment harness behind the `mdf` binary.

pub mod autodiff;
pub mod blocks;
mod error;
pub mod estimator;
pub mod eval;
pub mod filters;
pub mod fusion;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
