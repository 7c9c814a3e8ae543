//! Experiment runner: pretrains a base policy per seed, runs the requested
//! trainers on it, evaluates held-out samples on a fixed cadence and writes
//! per-run CSV curves plus a JSON summary.

mod eval;
mod report;
mod run;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use eval::{evaluate_policy, noisy_sets, shuffled_sets, Generator, PolicySampler, TemplateOracle};
pub use report::{
    compare_methods, ComparisonReport, EvalPoint, MethodResult, Outcome, PairwiseComparison,
    RmEvalRow, RunSummary, SeedOutcome,
};
pub use run::{run_experiment, RunSpec};

use crate::data::{make_class_specs, ClassSpec};
use crate::diffusion::{DenoiserLayout, NoiseSchedule};
use crate::error::{config_err, Error, Result};
use crate::trainers::{PretrainConfig, ReflConfig, VpoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Pretrain,
    OnlineVpo,
    OfflineDpo,
    Refl,
    RmEval,
    Sweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Pretrain,
        ExperimentKind::OnlineVpo,
        ExperimentKind::OfflineDpo,
        ExperimentKind::Refl,
        ExperimentKind::RmEval,
        ExperimentKind::Sweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Pretrain => "pretrain",
            ExperimentKind::OnlineVpo => "online_vpo",
            ExperimentKind::OfflineDpo => "offline_dpo",
            ExperimentKind::Refl => "refl",
            ExperimentKind::RmEval => "rm_eval",
            ExperimentKind::Sweep => "sweep",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown experiment kind {s:?}")))
    }
}

/// Alignment trainers that can be compared or swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    OnlineVpo,
    OfflineDpo,
    Refl,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 3] = [TrainerKind::OnlineVpo, TrainerKind::OfflineDpo, TrainerKind::Refl];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainerKind::OnlineVpo => "online_vpo",
            TrainerKind::OfflineDpo => "offline_dpo",
            TrainerKind::Refl => "refl",
        }
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown trainer {s:?}")))
    }
}

/// The synthetic task and the denoiser trained on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub classes: usize,
    pub frames: usize,
    pub dims: usize,
    pub sigma_data: f64,
    pub n_per_class: usize,
    /// Classes excluded from the alignment prompts (still evaluated).
    pub holdout: Vec<usize>,
    /// Seed of the class templates; shared by every run so seeds are matched.
    pub spec_seed: u64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub time_embed_width: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        let layout = DenoiserLayout::default();
        Self {
            classes: layout.classes,
            frames: layout.frames,
            dims: layout.dims,
            sigma_data: 0.05,
            n_per_class: 256,
            holdout: Vec::new(),
            spec_seed: 0,
            timesteps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
            hidden: layout.hidden,
            time_embed_width: layout.time_embed_width,
        }
    }
}

impl DomainConfig {
    pub fn layout(&self) -> DenoiserLayout {
        DenoiserLayout {
            frames: self.frames,
            dims: self.dims,
            classes: self.classes,
            time_embed_width: self.time_embed_width,
            hidden: self.hidden.clone(),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn specs(&self) -> Result<Vec<ClassSpec>> {
        make_class_specs(self.classes, self.dims, self.spec_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    /// Pairs collected from the frozen base policy before training.
    pub pairs: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self { pairs: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmEvalConfig {
    pub sets: usize,
    pub set_size: usize,
    /// Per-candidate noise scale range for the noisy-set family.
    pub noise_min: f64,
    pub noise_max: f64,
}

impl Default for RmEvalConfig {
    fn default() -> Self {
        Self {
            sets: 500,
            set_size: 8,
            noise_min: 0.02,
            noise_max: 0.3,
        }
    }
}

/// Sweep grid; an empty axis keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub trainers: Vec<TrainerKind>,
    pub candidates: Vec<usize>,
    pub k_interval: Vec<usize>,
    pub dimension: Vec<crate::rewards::Dimension>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trainers: vec![TrainerKind::OnlineVpo],
            candidates: Vec::new(),
            k_interval: Vec::new(),
            dimension: Vec::new(),
        }
    }
}

/// Everything needed to reproduce an experiment. The `seed` fields of the
/// trainer sections are ignored: each run uses its entry of `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub eval_interval: usize,
    /// Held-out samples per prompt at every evaluation.
    pub eval_samples: usize,
    /// Trainers compared side by side for the single-trainer kinds; the
    /// requested kind is always included.
    pub compare_with: Vec<TrainerKind>,
    pub domain: DomainConfig,
    pub pretrain: PretrainConfig,
    pub vpo: VpoConfig,
    pub offline: OfflineConfig,
    pub refl: ReflConfig,
    pub rm_eval: RmEvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::OnlineVpo,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            eval_interval: 50,
            eval_samples: 32,
            compare_with: Vec::new(),
            domain: DomainConfig::default(),
            pretrain: PretrainConfig::default(),
            vpo: VpoConfig::default(),
            offline: OfflineConfig::default(),
            refl: ReflConfig::default(),
            rm_eval: RmEvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seed list is empty"));
        }
        if self.eval_interval == 0 {
            return Err(config_err("eval interval must be >= 1"));
        }
        if self.eval_samples == 0 {
            return Err(config_err("eval sample count must be >= 1"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(config_err("seed list has duplicates"));
        }
        self.domain.layout().validate()?;
        self.domain.schedule()?;
        self.vpo.validate()?;
        if self.offline.pairs == 0 {
            return Err(config_err("offline pair count must be >= 1"));
        }
        if self.rm_eval.set_size < 4 || self.rm_eval.sets == 0 {
            return Err(config_err("reward-model evaluation needs sets of >= 4 candidates"));
        }
        if !(0.0..=self.rm_eval.noise_max).contains(&self.rm_eval.noise_min) {
            return Err(config_err("noise range must satisfy 0 <= noise_min <= noise_max"));
        }
        if self.domain.holdout.len() >= self.domain.classes {
            return Err(config_err("every class is held out"));
        }
        if self.kind == ExperimentKind::Sweep && self.sweep.trainers.is_empty() {
            return Err(config_err("sweep lists no trainers"));
        }
        if self.sweep.candidates.iter().any(|&n| n < 2) || self.sweep.k_interval.contains(&0) {
            return Err(config_err("sweep values need N >= 2 and K >= 1"));
        }
        Ok(())
    }
}
