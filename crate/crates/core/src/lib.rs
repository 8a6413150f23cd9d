//! Continuous-time channel prediction with stacked neural-ODE blocks.
//!
//! The crate is `no_std` and only needs `alloc`. It contains everything that
//! is pure computation:
//!
//! - [`tape`]: dense `f64` tensors with a recording tape for reverse-mode
//!   gradients, plus a finite-difference [`gradcheck`].
//! - [`solver`]: fixed-step Euler / RK4 integration that can run in either
//!   time direction and is differentiable through every step.
//! - [`channel`]: a seeded multipath MIMO-OFDM channel generator.
//! - [`model`]: the ODE-Former network (embedding, fusion blocks, pointwise
//!   evolution head).
//! - [`train`]: NMSE loss, Adam, and a deterministic training loop.
//! - [`eval`]: analytic baselines, metrics and sweeps.
//!
//! File formats, threading and the command-line driver live in the companion
//! `odeformer` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod channel;
mod error;
pub mod eval;
pub mod gradcheck;
pub(crate) mod math;
pub mod model;
pub mod solver;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, NodeId, Tape, Tensor};
