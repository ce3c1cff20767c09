//! Delegative reinforcement learning on finite MDPs.
//!
//! * [`mdp`]: finite MDPs, advisors, delegative composition, sampling.
//! * [`planner`]: discounted and limit values, Blackwell-optimal actions, τ.
//! * [`advisor`]: ε-sanity checks and optimal-action tables.
//! * [`agent`]: the delegative posterior-sampling policy.
//! * [`infogain`]: entropy, KL, mutual information and inequality oracles.
//! * [`harness`]: Monte Carlo regret and delegation experiments.

pub mod advisor;
pub mod agent;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod infogain;
pub mod mdp;
pub mod planner;

pub use error::{DrlError, Result};
