use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ExperimentKind, TrainerKind};
use crate::error::{config_err, Result};
use crate::rewards::{Dimension, RankingMetrics, RewardStats};
use crate::trainers::TrainRunMetrics;

/// One held-out evaluation on the target dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    /// `None` for pretraining runs.
    pub trainer: Option<TrainerKind>,
    pub seed: u64,
    /// Failure message; `None` when the run completed.
    pub error: Option<String>,
    /// Output files, relative to the experiment's output directory.
    pub files: Vec<String>,
    pub final_stats: Option<RewardStats>,
    /// Target-dimension held-out curve.
    pub target_curve: Vec<EvalPoint>,
    pub skipped_steps: usize,
    pub ref_updates: Vec<usize>,
}

impl RunSummary {
    pub(crate) fn failed(label: &str, trainer: Option<TrainerKind>, seed: u64, error: String) -> Self {
        Self {
            label: label.to_string(),
            trainer,
            seed,
            error: Some(error),
            files: Vec::new(),
            final_stats: None,
            target_curve: Vec::new(),
            skipped_steps: 0,
            ref_updates: Vec::new(),
        }
    }

    pub(crate) fn from_metrics(
        label: &str,
        trainer: Option<TrainerKind>,
        seed: u64,
        metrics: &TrainRunMetrics,
        target: Dimension,
        files: Vec<String>,
    ) -> Self {
        Self {
            label: label.to_string(),
            trainer,
            seed,
            error: None,
            files,
            final_stats: metrics.final_eval().map(|e| e.stats),
            target_curve: metrics
                .evals
                .iter()
                .map(|e| EvalPoint {
                    step: e.step,
                    mean: e.stats.mean.get(target),
                    std: e.stats.std.get(target),
                })
                .collect(),
            skipped_steps: metrics.skipped(),
            ref_updates: metrics.ref_updates.clone(),
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn final_value(&self, dim: Dimension) -> Option<f64> {
        self.final_stats.map(|s| s.mean.get(dim))
    }

    pub fn value_at(&self, step: usize) -> Option<f64> {
        self.target_curve.iter().find(|p| p.step == step).map(|p| p.mean)
    }

    /// Best evaluation (earliest on ties).
    pub fn peak(&self) -> Option<EvalPoint> {
        self.target_curve
            .iter()
            .copied()
            .fold(None, |best: Option<EvalPoint>, p| match best {
                Some(b) if b.mean >= p.mean => Some(b),
                _ => Some(p),
            })
    }

    /// Relative drop from the peak to the last evaluation,
    /// `(peak - last) / |peak|`.
    pub fn decline_from_peak(&self) -> Option<f64> {
        let peak = self.peak()?;
        let last = self.target_curve.last()?;
        (peak.mean != 0.0).then(|| (peak.mean - last.mean) / peak.mean.abs())
    }
}

/// All runs of one method (label) across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub label: String,
    pub runs: Vec<RunSummary>,
}

impl MethodResult {
    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }

    pub fn run(&self, seed: u64) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.seed == seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// From `a`'s point of view.
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: String,
    pub b: String,
    pub dimension: Dimension,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Wins over decided seeds plus half the ties, over all seeds.
    pub win_rate: f64,
    pub per_seed: Vec<SeedOutcome>,
}

/// Per-seed comparison of final held-out means on `dim` for every ordered
/// pair `(i, j)`, `i < j`. A failed run loses to a completed one; two failed
/// runs tie. Every method must cover the same seeds.
pub fn compare_methods(methods: &[MethodResult], dim: Dimension) -> Result<Vec<PairwiseComparison>> {
    if methods.len() < 2 {
        return Err(config_err("comparison needs at least two methods"));
    }
    let seeds: BTreeSet<u64> = methods[0].seeds().into_iter().collect();
    for m in methods {
        let these: BTreeSet<u64> = m.seeds().into_iter().collect();
        if these != seeds || m.runs.len() != seeds.len() {
            return Err(config_err(format!(
                "method {} ran seeds {:?}, expected {:?}",
                m.label,
                m.seeds(),
                seeds
            )));
        }
    }
    let mut out = Vec::new();
    for (i, a) in methods.iter().enumerate() {
        for b in &methods[i + 1..] {
            let per_seed: Vec<SeedOutcome> = seeds
                .iter()
                .map(|&seed| {
                    let va = a.run(seed).and_then(|r| r.final_value(dim));
                    let vb = b.run(seed).and_then(|r| r.final_value(dim));
                    let outcome = match (va, vb) {
                        (Some(x), Some(y)) if x > y => Outcome::Win,
                        (Some(x), Some(y)) if x < y => Outcome::Loss,
                        (Some(_), None) => Outcome::Win,
                        (None, Some(_)) => Outcome::Loss,
                        _ => Outcome::Tie,
                    };
                    SeedOutcome { seed, a: va, b: vb, outcome }
                })
                .collect();
            let count = |o: Outcome| per_seed.iter().filter(|s| s.outcome == o).count();
            let (wins, losses, ties) = (count(Outcome::Win), count(Outcome::Loss), count(Outcome::Tie));
            out.push(PairwiseComparison {
                a: a.label.clone(),
                b: b.label.clone(),
                dimension: dim,
                wins,
                losses,
                ties,
                win_rate: (wins as f64 + 0.5 * ties as f64) / seeds.len() as f64,
                per_seed,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmEvalRow {
    pub seed: u64,
    /// Candidate-set family: `noisy` or `shuffled`.
    pub family: String,
    pub model: String,
    pub metrics: RankingMetrics,
}

/// Everything an experiment produced; serialized to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub kind: ExperimentKind,
    pub target: Dimension,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodResult>,
    pub comparisons: Vec<PairwiseComparison>,
    pub rm_eval: Vec<RmEvalRow>,
}

impl ComparisonReport {
    pub fn failures(&self) -> Vec<&RunSummary> {
        self.methods.iter().flat_map(|m| &m.runs).filter(|r| !r.ok()).collect()
    }

    pub fn all_ok(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn method(&self, label: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.label == label)
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&PairwiseComparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }
}
