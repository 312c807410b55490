//! Spiking transformer library: LIF neurons with learnable membrane time
//! constants, temporal-window self-attention over binary spike trains,
//! attention-map denoising, and BPTT training with surrogate gradients.
//!
//! Everything is deterministic: fixed-order accumulation in every kernel,
//! seeded RNG streams, and bit-reproducible training given the same config
//! and seed on the same machine.

pub mod attention;
pub mod cli;
pub mod data;
mod error;
pub mod model;
pub mod neuron;
pub mod numerics;
pub mod reference;
pub mod training;

pub use error::{DistaError, Result};
