//! One-step generation and likelihood learning through the long-short
//! flow-map view of drifting models.
//!
//! The crate is organised bottom-up:
//!
//! * [`net`]: a small feedforward network with parameter and input gradients,
//!   Adam and EMA.
//! * [`kernels`]: mollified time-indexed kernels and log-domain weighted
//!   statistics.
//! * [`closedform`]: closed-form Flow-Matching velocities and divergences.
//! * [`drift`]: attraction / repulsion fields and the generator losses.
//! * [`likelihood`]: the drift-likelihood loss, normalization penalty and
//!   importance sampling.
//! * [`data`]: 2D benchmark sets and base distributions.
//! * [`train`]: configs, presets, training loops and checkpoints.
//! * [`eval`]: metrics and verification sweeps.

pub mod closedform;
pub mod data;
pub mod drift;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod likelihood;
pub mod net;
pub mod parallel;
pub mod rng;
mod simd;
pub mod train;

pub use error::{Error, Result};

/// An `n × d` array of points, one per row.
pub type Batch = ndarray::Array2<f64>;
