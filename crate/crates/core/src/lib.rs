//! Online preference optimization for small trajectory diffusion models.
//!
//! A diffusion policy generates class-conditioned trajectories; synthetic
//! multi-dimensional reward models rank candidates; the online trainer turns
//! each ranked candidate set into a DPO pair and refreshes its reference model
//! on a fixed curriculum. Offline DPO and reward-feedback (ReFL) trainers are
//! included as baselines, along with an experiment harness.

pub mod data;
pub mod diffusion;
mod error;
pub mod harness;
pub mod nn;
pub mod rewards;
pub mod rng;
pub mod trainers;

pub use error::{Error, Result};
