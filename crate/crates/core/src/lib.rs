//! Discrete-time spiking networks converted from ReLU Q-networks.
//!
//! The crate trains a shallow Q-network on a miniature Breakout, transfers
//! its weights to a spiking twin, searches per-layer weight scales and
//! measures robustness to occluded inputs.

pub mod ann;
pub mod dqn;
pub mod env;
pub mod error;
pub mod harness;
pub mod eval;
pub mod neuron;
pub mod optimize;
pub mod snn;
pub mod tensor;
pub mod weights_io;

pub use error::{Error, Result};
