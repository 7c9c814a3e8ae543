//! Diffusion pretraining and the three alignment trainers: online VPO,
//! offline DPO and ReFL.

mod dpo;
mod metrics;
mod offline;
mod online;
mod pretrain;
mod refl;

use serde::{Deserialize, Serialize};

pub use dpo::{
    dpo_loss, dpo_loss_at, dpo_objective, softplus, DpoLoss,
};
pub use metrics::{EvalHook, EvalRecord, StepRecord, TrainRunMetrics};
pub use offline::{build_offline_dataset, train_offline_dpo};
pub use online::{generate_candidates, select_indices, select_pair, train_online_vpo, train_online_with, Ranker};
pub use pretrain::{pretrain, PretrainConfig};
pub use refl::{refl_loss_at, refl_step, train_refl, DifferentiableReward, ReflConfig, ReflStep};

use crate::diffusion::Trajectory;
use crate::error::{config_err, Result};
use crate::rewards::{Dimension, RewardVector};

/// Consecutive skipped steps tolerated before the policy is declared degenerate.
pub const MAX_CONSECUTIVE_SKIPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Online { step: usize },
    Offline { dataset_id: u64, attempt: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub condition: usize,
    pub winner: Trajectory,
    pub loser: Trajectory,
    pub source: PairSource,
    /// Selection-criterion scores.
    pub winner_score: f64,
    pub loser_score: f64,
    pub winner_rewards: RewardVector,
    pub loser_rewards: RewardVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VpoConfig {
    /// Candidates sampled per prompt (N).
    pub candidates: usize,
    /// Reference refresh interval in steps (K); `usize::MAX` never refreshes.
    pub k_interval: usize,
    pub beta: f64,
    pub steps: usize,
    /// Independent (timestep, noise) draws averaged in each DPO loss.
    pub batch_size: usize,
    pub sampler_steps: usize,
    pub dimension: Dimension,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VpoConfig {
    fn default() -> Self {
        Self {
            candidates: 4,
            k_interval: 200,
            beta: 1.0,
            steps: 500,
            batch_size: 4,
            sampler_steps: 30,
            dimension: Dimension::TemporalConsistency,
            lr: 5e-5,
            seed: 0,
        }
    }
}

impl VpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates < 2 {
            return Err(config_err("need at least 2 candidates"));
        }
        if self.k_interval == 0 {
            return Err(config_err("curriculum interval must be >= 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(config_err("beta must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.sampler_steps == 0 {
            return Err(config_err("steps, batch size and sampler steps must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err("learning rate must be positive"));
        }
        Ok(())
    }
}
