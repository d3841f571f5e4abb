//! Fixed-point deep reinforcement learning.
//!
//! The crate bundles a Q16.16 arithmetic layer ([`fixnum`]), a dense network
//! with fixed-point backpropagation and Adam ([`nn`]), the quantization delay
//! controller that switches activations from 32 to 16 bits ([`qat`]), a DDPG
//! training loop ([`ddpg`]) over small built-in control tasks ([`env`]), and a
//! cycle-level model of a tiled 16x16 MAC array accelerator ([`accel_sim`]).
//!
//! Batch-level work (per-sample forward/backward, policy evaluation episodes,
//! simulator sweeps) runs on rayon when the `parallel` feature is enabled and
//! falls back to plain iteration otherwise. Results are identical either way.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accel_sim;
pub mod checkpoint;
pub mod ddpg;
pub mod env;
mod error;
pub mod fixnum;
pub mod nn;
pub mod par;
pub mod qat;
pub mod rng;

pub use error::{Error, Result};
