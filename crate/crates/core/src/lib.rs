//! Offline policy learning as a leader-follower game.
//!
//! The leader is a policy `π_ω` that ascends the total derivative of its value
//! `q(s⁰, π)`; the follower is a linear value function `q_θ` that descends a
//! pessimistic loss made of the initial value plus a kernel-weighted Bellman
//! error. This crate provides the objectives, their derivatives, the
//! two-timescale learner, equilibrium diagnostics, the synthetic
//! environments, dataset tooling, and the experiment driver.

pub mod datasets;
pub mod environments;
pub mod experiments;
pub mod error;
pub mod features;
pub mod gradients;
pub mod kernel;
pub mod learner;
pub mod objectives;

pub use error::{Error, Result};
