//! Q-learning with adjoint-matched flow policies.
//!
//! A desk-scale library for TD-based reinforcement learning with expressive
//! flow-matching policies optimized through lean-adjoint recursions instead of
//! backpropagation through the sampling chain. Everything runs on dense f64
//! arrays on one core and is verified against analytic oracles.

pub mod adjoint;
pub mod agents;
pub mod critic;
pub mod env;
pub mod error;
pub mod flow;
pub mod harness;
pub mod nn;

pub use error::{QamError, Result};
