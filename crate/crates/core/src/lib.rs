//! Simulation of miner strategy when protocol rules can change under the
//! miners' feet.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: protocol state, miners, actions, reward schedule and the
//!   stage-game payoff function.
//! - [`mutation`]: Poisson-gated rule shocks and the rolling volatility
//!   estimate of protocol changes.
//! - [`discounting`]: endogenous discount factors and institutional
//!   confidence.
//! - [`game`]: finite stage games, best responses, pure Nash enumeration,
//!   trigger-strategy thresholds and equilibrium churn.
//! - [`bellman`]: value iteration over a discretised protocol-state space.
//! - [`harness`]: the epoch loop, parameter sweeps and collapse-threshold
//!   detection.
//! - [`config`]: the versioned configuration file that drives all of the
//!   above.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bellman;
pub mod config;
pub mod discounting;
pub mod error;
pub mod game;
pub mod harness;
pub mod model;
pub mod mutation;
pub mod seed;

pub use error::{Error, Result};
