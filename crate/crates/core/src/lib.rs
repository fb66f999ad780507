//! Direct-training engine for spiking neural networks.
//!
//! The crate provides, bottom to top:
//! - [`tensor`] / [`tape`]: dense rank-<=4 tensors with a reverse-mode
//!   differentiation tape and custom-gradient nodes,
//! - [`neuron`]: leaky integrate-and-fire and circulate-firing dynamics,
//! - [`surrogate`]: fixed and learnable surrogate-gradient families plus a
//!   smoothed forward used as an end-to-end gradient oracle,
//! - [`loss`]: cross-entropy readout and the positive-negative balanced
//!   membrane regularizer,
//! - [`network`] / [`trainer`]: T-step unrolling with voting readout,
//!   backpropagation through time, SGD with momentum and cosine schedule,
//!   evaluation, and checkpointing,
//! - [`data`]: IDX ingestion, synthetic tasks, spike encoding, noise
//!   injection,
//! - [`energy`]: synaptic-operation counting and power estimates.

// `!(x > 0.0)` in config validation deliberately rejects NaN, which the
// suggested `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index-based loops mirror the flat-buffer arithmetic of the kernels
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod network;
pub mod neuron;
pub mod rng;
pub mod surrogate;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
