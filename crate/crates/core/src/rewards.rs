//! Synthetic multi-dimensional trajectory rewards and ranking metrics.
//!
//! All four reward dimensions are differentiable in the trajectory values so the
//! same models drive both preference ranking and reward backpropagation:
//!
//! * temporal consistency: `-mean_f |y[f+1] - 2 y[f] + y[f-1]|^2` over interior frames
//! * dynamic degree: `mean_f (sqrt(|y[f+1] - y[f]|^2 + eps^2) - eps)`
//! * visual quality: `-mean_f |y[f] - template[f]|^2`
//! * alignment: Pearson correlation between `y` and the class template

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ClassSpec;
use crate::diffusion::{Trajectory, MIN_FRAMES};
use crate::error::{config_err, shape_err, Error, Result};

/// Softening for the displacement norm in `dynamic_degree`.
pub const DYNAMIC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    VisualQuality,
    TemporalConsistency,
    DynamicDegree,
    Alignment,
    Global,
}

impl Dimension {
    pub const RAW: [Dimension; 4] = [
        Dimension::VisualQuality,
        Dimension::TemporalConsistency,
        Dimension::DynamicDegree,
        Dimension::Alignment,
    ];
    pub const ALL: [Dimension; 5] = [
        Dimension::VisualQuality,
        Dimension::TemporalConsistency,
        Dimension::DynamicDegree,
        Dimension::Alignment,
        Dimension::Global,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::VisualQuality => "visual_quality",
            Dimension::TemporalConsistency => "temporal_consistency",
            Dimension::DynamicDegree => "dynamic_degree",
            Dimension::Alignment => "alignment",
            Dimension::Global => "global",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown reward dimension {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardVector {
    pub visual_quality: f64,
    pub temporal_consistency: f64,
    pub dynamic_degree: f64,
    pub alignment: f64,
    /// Mean of the four dimensions: raw for a lone score, z-scored within the
    /// candidate set for [`RewardModel::score_candidates`].
    pub global: f64,
}

impl RewardVector {
    pub fn get(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::VisualQuality => self.visual_quality,
            Dimension::TemporalConsistency => self.temporal_consistency,
            Dimension::DynamicDegree => self.dynamic_degree,
            Dimension::Alignment => self.alignment,
            Dimension::Global => self.global,
        }
    }

    pub fn get_mut(&mut self, dim: Dimension) -> &mut f64 {
        match dim {
            Dimension::VisualQuality => &mut self.visual_quality,
            Dimension::TemporalConsistency => &mut self.temporal_consistency,
            Dimension::DynamicDegree => &mut self.dynamic_degree,
            Dimension::Alignment => &mut self.alignment,
            Dimension::Global => &mut self.global,
        }
    }

    pub fn raw(&self) -> [f64; 4] {
        [
            self.visual_quality,
            self.temporal_consistency,
            self.dynamic_degree,
            self.alignment,
        ]
    }
}

fn check_frames(y: &Trajectory) -> Result<()> {
    if y.frames() < MIN_FRAMES {
        return Err(shape_err(format!("need {MIN_FRAMES} frames to score")));
    }
    Ok(())
}

pub fn temporal_consistency(y: &Trajectory) -> f64 {
    let n = (y.frames() - 2) as f64;
    -(1..y.frames() - 1)
        .map(|f| {
            let (a, b, c) = (y.frame(f - 1), y.frame(f), y.frame(f + 1));
            (0..y.dims()).map(|d| (c[d] - 2.0 * b[d] + a[d]).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / n
}

pub fn dynamic_degree(y: &Trajectory) -> f64 {
    let n = (y.frames() - 1) as f64;
    (0..y.frames() - 1)
        .map(|f| {
            let sq: f64 = y.frame(f + 1).iter().zip(y.frame(f)).map(|(b, a)| (b - a).powi(2)).sum();
            (sq + DYNAMIC_EPS * DYNAMIC_EPS).sqrt() - DYNAMIC_EPS
        })
        .sum::<f64>()
        / n
}

pub fn visual_quality(y: &Trajectory, template: &Trajectory) -> f64 {
    -y.values()
        .iter()
        .zip(template.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / y.frames() as f64
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pearson correlation of the flattened values; 0 when either side is constant.
pub fn alignment(y: &Trajectory, template: &Trajectory) -> f64 {
    let (yc, tc) = (centered(y.values()), centered(template.values()));
    let denom = dot(&yc, &yc).sqrt() * dot(&tc, &tc).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot(&yc, &tc) / denom).clamp(-1.0, 1.0)
    }
}

fn temporal_consistency_grad(y: &Trajectory) -> Vec<f64> {
    let d = y.dims();
    let scale = 2.0 / (y.frames() - 2) as f64;
    let v = y.values();
    let mut g = vec![0.0; v.len()];
    for f in 1..y.frames() - 1 {
        for k in 0..d {
            let s = v[(f + 1) * d + k] - 2.0 * v[f * d + k] + v[(f - 1) * d + k];
            g[(f + 1) * d + k] -= scale * s;
            g[f * d + k] += 2.0 * scale * s;
            g[(f - 1) * d + k] -= scale * s;
        }
    }
    g
}

fn dynamic_degree_grad(y: &Trajectory) -> Vec<f64> {
    let d = y.dims();
    let scale = 1.0 / (y.frames() - 1) as f64;
    let v = y.values();
    let mut g = vec![0.0; v.len()];
    for f in 0..y.frames() - 1 {
        let diff: Vec<f64> = (0..d).map(|k| v[(f + 1) * d + k] - v[f * d + k]).collect();
        let norm = (dot(&diff, &diff) + DYNAMIC_EPS * DYNAMIC_EPS).sqrt();
        for (k, dk) in diff.iter().enumerate() {
            g[(f + 1) * d + k] += scale * dk / norm;
            g[f * d + k] -= scale * dk / norm;
        }
    }
    g
}

fn visual_quality_grad(y: &Trajectory, template: &Trajectory) -> Vec<f64> {
    let scale = 2.0 / y.frames() as f64;
    y.values()
        .iter()
        .zip(template.values())
        .map(|(a, b)| -scale * (a - b))
        .collect()
}

fn alignment_grad(y: &Trajectory, template: &Trajectory) -> Vec<f64> {
    let (yc, tc) = (centered(y.values()), centered(template.values()));
    let (yy, tt) = (dot(&yc, &yc), dot(&tc, &tc));
    if yy == 0.0 || tt == 0.0 {
        return vec![0.0; yc.len()];
    }
    let denom = yy.sqrt() * tt.sqrt();
    let r = dot(&yc, &tc) / denom;
    yc.iter().zip(&tc).map(|(a, b)| b / denom - r * a / yy).collect()
}

/// Scores candidate sets; higher is better.
pub trait Scorer: Sync {
    fn name(&self) -> String;
    fn score_set(&self, set: &[Trajectory]) -> Result<Vec<f64>>;
}

/// Synthetic trajectory reward model with one selected dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub dimension: Dimension,
    templates: Vec<Trajectory>,
}

impl RewardModel {
    pub fn new(dimension: Dimension, templates: Vec<Trajectory>) -> Result<Self> {
        if templates.is_empty() {
            return Err(config_err("reward model needs class templates"));
        }
        Ok(Self {
            dimension,
            templates,
        })
    }

    pub fn from_specs(dimension: Dimension, specs: &[ClassSpec], frames: usize, dims: usize) -> Result<Self> {
        let templates = specs
            .iter()
            .map(|s| s.template(frames, dims))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dimension, templates)
    }

    pub fn with_dimension(&self, dimension: Dimension) -> Self {
        Self {
            dimension,
            templates: self.templates.clone(),
        }
    }

    pub fn templates(&self) -> &[Trajectory] {
        &self.templates
    }

    pub fn template(&self, condition: usize) -> Result<&Trajectory> {
        self.templates.get(condition).ok_or_else(|| {
            Error::Index(format!("no template for class {condition}"))
        })
    }

    fn checked_template(&self, y: &Trajectory, condition: usize) -> Result<&Trajectory> {
        check_frames(y)?;
        let t = self.template(condition)?;
        if !t.same_shape(y) {
            return Err(shape_err("trajectory shape differs from class template"));
        }
        Ok(t)
    }

    /// All dimensions for one trajectory; `global` is the plain mean of the four.
    pub fn score(&self, y: &Trajectory, condition: usize) -> Result<RewardVector> {
        let t = self.checked_template(y, condition)?;
        let mut r = RewardVector {
            visual_quality: visual_quality(y, t),
            temporal_consistency: temporal_consistency(y),
            dynamic_degree: dynamic_degree(y),
            alignment: alignment(y, t),
            global: 0.0,
        };
        r.global = r.raw().iter().sum::<f64>() / 4.0;
        Ok(r)
    }

    /// Scores a candidate set; `global` becomes the mean of per-set z-scores.
    pub fn score_candidates(&self, set: &[Trajectory]) -> Result<Vec<RewardVector>> {
        let mut out = set
            .iter()
            .map(|y| self.score(y, y.condition))
            .collect::<Result<Vec<_>>>()?;
        let z = zscore_global(&out);
        for (r, g) in out.iter_mut().zip(z) {
            r.global = g;
        }
        Ok(out)
    }

    /// Value and gradient of the selected dimension with respect to `y`.
    /// `Global` differentiates the plain mean of the four raw dimensions.
    pub fn value_and_grad(&self, y: &Trajectory, condition: usize) -> Result<(f64, Vec<f64>)> {
        let t = self.checked_template(y, condition)?;
        let one = |dim: Dimension| -> (f64, Vec<f64>) {
            match dim {
                Dimension::VisualQuality => (visual_quality(y, t), visual_quality_grad(y, t)),
                Dimension::TemporalConsistency => (temporal_consistency(y), temporal_consistency_grad(y)),
                Dimension::DynamicDegree => (dynamic_degree(y), dynamic_degree_grad(y)),
                Dimension::Alignment => (alignment(y, t), alignment_grad(y, t)),
                Dimension::Global => unreachable!(),
            }
        };
        Ok(match self.dimension {
            Dimension::Global => {
                let mut value = 0.0;
                let mut grad = vec![0.0; y.values().len()];
                for dim in Dimension::RAW {
                    let (v, g) = one(dim);
                    value += v / 4.0;
                    grad.iter_mut().zip(g).for_each(|(a, b)| *a += b / 4.0);
                }
                (value, grad)
            }
            dim => one(dim),
        })
    }
}

/// Per-dimension mean and population standard deviation over a sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardStats {
    pub count: usize,
    pub mean: RewardVector,
    pub std: RewardVector,
}

impl RewardStats {
    pub fn from_vectors(rewards: &[RewardVector]) -> Result<Self> {
        if rewards.is_empty() {
            return Err(config_err("statistics of an empty sample"));
        }
        let n = rewards.len() as f64;
        let mut mean = RewardVector::default();
        let mut std = RewardVector::default();
        for dim in Dimension::ALL {
            let m = rewards.iter().map(|r| r.get(dim)).sum::<f64>() / n;
            let v = rewards.iter().map(|r| (r.get(dim) - m).powi(2)).sum::<f64>() / n;
            *mean.get_mut(dim) = m;
            *std.get_mut(dim) = v.sqrt();
        }
        Ok(Self {
            count: rewards.len(),
            mean,
            std,
        })
    }
}

/// Mean over the four dimensions of each candidate's within-set z-score.
/// A dimension with zero spread contributes 0.
pub fn zscore_global(scores: &[RewardVector]) -> Vec<f64> {
    let n = scores.len() as f64;
    let mut global = vec![0.0; scores.len()];
    for k in 0..4 {
        let vals: Vec<f64> = scores.iter().map(|r| r.raw()[k]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 0.0 {
            for (g, v) in global.iter_mut().zip(&vals) {
                *g += (v - mean) / std / 4.0;
            }
        }
    }
    global
}

impl Scorer for RewardModel {
    fn name(&self) -> String {
        self.dimension.to_string()
    }

    fn score_set(&self, set: &[Trajectory]) -> Result<Vec<f64>> {
        Ok(self
            .score_candidates(set)?
            .iter()
            .map(|r| r.get(self.dimension))
            .collect())
    }
}

/// Image-style scorer: rates every frame on its own against the nearest point
/// anywhere on the class curve, then averages. Blind to frame order.
#[derive(Debug, Clone)]
pub struct FrameWiseScorer {
    templates: Vec<Trajectory>,
}

impl FrameWiseScorer {
    pub fn new(templates: Vec<Trajectory>) -> Self {
        Self { templates }
    }

    pub fn score_one(&self, y: &Trajectory) -> Result<f64> {
        check_frames(y)?;
        let t = self
            .templates
            .get(y.condition)
            .ok_or_else(|| Error::Index(format!("no template for class {}", y.condition)))?;
        let per_frame = y.frame_iter().map(|p| {
            t.frame_iter()
                .map(|q| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        });
        Ok(-per_frame.sum::<f64>() / y.frames() as f64)
    }
}

impl Scorer for FrameWiseScorer {
    fn name(&self) -> String {
        "frame_wise".into()
    }

    fn score_set(&self, set: &[Trajectory]) -> Result<Vec<f64>> {
        set.iter().map(|y| self.score_one(y)).collect()
    }
}

/// Scores from a keyed hash of the trajectory values: uniform on [0, 1),
/// independent of quality, reproducible.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn name(&self) -> String {
        "random".into()
    }

    fn score_set(&self, set: &[Trajectory]) -> Result<Vec<f64>> {
        Ok(set
            .iter()
            .map(|y| {
                let h = y.values().iter().fold(self.seed, |h, v| {
                    crate::rng::derive_seed(h, v.to_bits(), 0)
                });
                (h >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect())
    }
}

/// Scores for one query plus the index of the preferred candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    scores: Vec<f64>,
    truth: usize,
}

impl RankingRecord {
    pub fn new(scores: Vec<f64>, truth: usize) -> Result<Self> {
        if scores.len() < 2 {
            return Err(config_err("ranking needs at least two candidates"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite ranking score".into()));
        }
        if truth >= scores.len() {
            return Err(Error::Index(format!(
                "ground truth {truth} outside {} candidates",
                scores.len()
            )));
        }
        Ok(Self { scores, truth })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> usize {
        self.truth
    }

    /// 1-based rank of the ground truth under descending scores; ties go to the
    /// lower index.
    pub fn truth_rank(&self) -> usize {
        let s = self.scores[self.truth];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < self.truth))
            .count()
    }
}

pub fn mrr(records: &[RankingRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(config_err("mean reciprocal rank of no queries"));
    }
    Ok(records.iter().map(|r| 1.0 / r.truth_rank() as f64).sum::<f64>() / records.len() as f64)
}

pub fn recall_at_k(records: &[RankingRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(config_err("recall of no queries"));
    }
    let min_n = records.iter().map(|r| r.scores.len()).min().unwrap_or(0);
    if k == 0 || k > min_n {
        return Err(config_err(format!("k must be in 1..={min_n}, got {k}")));
    }
    let hits = records.iter().filter(|r| r.truth_rank() <= k).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub recall_at_1: f64,
    pub recall_at_2: f64,
    pub recall_at_4: f64,
}

impl RankingMetrics {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("mrr", self.mrr),
            ("recall@1", self.recall_at_1),
            ("recall@2", self.recall_at_2),
            ("recall@4", self.recall_at_4),
        ]
    }
}

/// Index of the candidate closest to its class template (ties: lower index).
pub fn template_oracle(set: &[Trajectory], templates: &[Trajectory]) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for (i, y) in set.iter().enumerate() {
        let t = templates
            .get(y.condition)
            .ok_or_else(|| Error::Index(format!("no template for class {}", y.condition)))?;
        let d: f64 = y.values().iter().zip(t.values()).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

pub fn evaluate_reward_model(
    scorer: &dyn Scorer,
    candidate_sets: &[Vec<Trajectory>],
    truth: &[usize],
) -> Result<RankingMetrics> {
    if candidate_sets.len() != truth.len() {
        return Err(shape_err("one ground-truth index per candidate set"));
    }
    let records = candidate_sets
        .iter()
        .zip(truth)
        .map(|(set, &t)| {
            if set.len() < 4 {
                return Err(config_err("reward-model evaluation needs >= 4 candidates per set"));
            }
            RankingRecord::new(scorer.score_set(set)?, t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankingMetrics {
        mrr: mrr(&records)?,
        recall_at_1: recall_at_k(&records, 1)?,
        recall_at_2: recall_at_k(&records, 2)?,
        recall_at_4: recall_at_k(&records, 4)?,
    })
}

/// Splits a flat candidate batch (batch CSV order) into sets of `set_size`.
pub fn candidate_sets_from_batch(items: Vec<Trajectory>, set_size: usize) -> Result<Vec<Vec<Trajectory>>> {
    if set_size < 2 || items.len() % set_size != 0 {
        return Err(shape_err(format!(
            "{} candidates do not split into sets of {set_size}",
            items.len()
        )));
    }
    let mut sets = Vec::with_capacity(items.len() / set_size);
    let mut iter = items.into_iter().peekable();
    while iter.peek().is_some() {
        sets.push(iter.by_ref().take(set_size).collect());
    }
    Ok(sets)
}

/// One `model,metric,value` row per model and metric.
pub fn write_metrics_csv<W: Write>(rows: &[(String, RankingMetrics)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "metric", "value"])?;
    for (name, m) in rows {
        for (metric, value) in m.named() {
            w.write_record([name.as_str(), metric, &value.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_class_specs;
    use crate::rng::{normal_vec, rng_from_seed};
    use proptest::prelude::*;
    use rand::Rng;

    fn line(frames: usize, v: [f64; 2], start: [f64; 2]) -> Trajectory {
        let vals = (0..frames)
            .flat_map(|f| [start[0] + v[0] * f as f64, start[1] + v[1] * f as f64])
            .collect();
        Trajectory::new(frames, 2, vals, 0, None).unwrap()
    }

    fn model(dim: Dimension) -> RewardModel {
        let specs = make_class_specs(3, 2, 4).unwrap();
        RewardModel::from_specs(dim, &specs, 8, 2).unwrap()
    }

    #[test]
    fn constant_trajectory_has_no_curvature_or_motion() {
        let y = line(8, [0.0, 0.0], [0.3, -1.0]);
        assert_eq!(temporal_consistency(&y), 0.0);
        assert_eq!(dynamic_degree(&y), 0.0);
    }

    #[test]
    fn straight_line() {
        let y = line(8, [0.3, -0.4], [1.0, 2.0]);
        assert!(temporal_consistency(&y).abs() < 1e-28);
        // softened norm: sqrt(|v|^2 + eps^2) - eps
        assert!((dynamic_degree(&y) - 0.5).abs() <= DYNAMIC_EPS);
    }

    #[test]
    fn zigzag_second_difference() {
        let y = Trajectory::new(6, 1, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0], 0, None).unwrap();
        assert_eq!(temporal_consistency(&y), -4.0);
    }

    #[test]
    fn template_scores_perfectly() {
        let rm = model(Dimension::Alignment);
        for c in 0..3 {
            let t = rm.template(c).unwrap().clone();
            let r = rm.score(&t, c).unwrap();
            assert!((r.alignment - 1.0).abs() < 1e-12);
            assert_eq!(r.visual_quality, 0.0);
        }
    }

    #[test]
    fn too_short_or_mismatched_shape_rejected() {
        let rm = model(Dimension::TemporalConsistency);
        let y = line(5, [0.1, 0.1], [0.0, 0.0]);
        assert!(matches!(rm.score(&y, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn visual_quality_decreases_with_noise() {
        let rm = model(Dimension::VisualQuality);
        let tpl = rm.template(1).unwrap().clone();
        let mut rng = rng_from_seed(3);
        let trials = 400;
        let mut prev: Option<(f64, f64)> = None;
        for sigma in [0.05, 0.1, 0.2, 0.4] {
            let vals: Vec<f64> = (0..trials)
                .map(|_| {
                    let noisy: Vec<f64> = tpl
                        .values()
                        .iter()
                        .zip(normal_vec(&mut rng, 16))
                        .map(|(v, z)| v + sigma * z)
                        .collect();
                    let y = Trajectory::new(8, 2, noisy, 1, None).unwrap();
                    rm.score(&y, 1).unwrap().visual_quality
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / trials as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
            let se = sd / (trials as f64).sqrt();
            if let Some((pm, pse)) = prev {
                assert!(mean + 3.0 * se < pm - 3.0 * pse || mean < pm - 3.0 * (se * se + pse * pse).sqrt());
            }
            prev = Some((mean, se));
        }
    }

    #[test]
    fn global_zscore_is_mean_of_standardized_dims() {
        let rm = model(Dimension::Global);
        let mut rng = rng_from_seed(8);
        let set: Vec<Trajectory> = (0..4)
            .map(|_| Trajectory::new(8, 2, normal_vec(&mut rng, 16), 2, None).unwrap())
            .collect();
        let scored = rm.score_candidates(&set).unwrap();
        assert!(scored.iter().map(|r| r.global).sum::<f64>().abs() < 1e-12);
        let same = vec![set[0].clone(); 3];
        assert!(rm.score_candidates(&same).unwrap().iter().all(|r| r.global == 0.0));
    }

    fn fd_check(rm: &RewardModel, y: &Trajectory) {
        let (v, g) = rm.value_and_grad(y, y.condition).unwrap();
        let value = |vals: Vec<f64>| {
            let t = Trajectory::new(y.frames(), y.dims(), vals, y.condition, None).unwrap();
            rm.value_and_grad(&t, t.condition).unwrap().0
        };
        assert_eq!(v, value(y.values().to_vec()));
        let h = 1e-6;
        for i in 0..g.len() {
            let mut p = y.values().to_vec();
            p[i] += h;
            let mut m = y.values().to_vec();
            m[i] -= h;
            let num = (value(p) - value(m)) / (2.0 * h);
            let err = (num - g[i]).abs();
            assert!(err <= 1e-7 || err <= 1e-4 * num.abs().max(g[i].abs()),
                "{:?} coord {i}: analytic {} numeric {num}", rm.dimension, g[i]);
        }
    }

    #[test]
    fn reward_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(12);
        for dim in Dimension::ALL {
            let rm = model(dim);
            for _ in 0..5 {
                let y = Trajectory::new(8, 2, normal_vec(&mut rng, 16), 1, None).unwrap();
                fd_check(&rm, &y);
            }
        }
    }

    #[test]
    fn mrr_examples() {
        let first = RankingRecord::new(vec![0.9, 0.1, 0.2], 0).unwrap();
        assert_eq!(mrr(&[first.clone(), first]).unwrap(), 1.0);
        let rank2 = RankingRecord::new(vec![0.9, 0.5, 0.1, 0.0], 1).unwrap();
        let rank4 = RankingRecord::new(vec![0.9, 0.5, 0.1, 0.0], 3).unwrap();
        assert_eq!(mrr(&[rank2, rank4]).unwrap(), 0.375);
        let last = RankingRecord::new((0..8).map(|i| 8.0 - i as f64).collect(), 7).unwrap();
        assert_eq!(mrr(&[last]).unwrap(), 0.125);
        assert!(matches!(mrr(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let r = RankingRecord::new(vec![0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(r.truth_rank(), 3);
        let r = RankingRecord::new(vec![0.5, 0.5, 0.5], 0).unwrap();
        assert_eq!(r.truth_rank(), 1);
    }

    #[test]
    fn recall_examples() {
        let a = RankingRecord::new(vec![1.0, 0.0, 0.5, 0.2], 0).unwrap();
        let b = RankingRecord::new(vec![1.0, 0.8, 0.5, 0.2], 2).unwrap();
        assert_eq!(recall_at_k(&[a.clone(), b.clone()], 4).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[a.clone(), b.clone()], 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[a.clone()], 1).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&[a.clone()], 0), Err(Error::Config(_))));
        assert!(matches!(recall_at_k(&[a], 5), Err(Error::Config(_))));
    }

    #[test]
    fn record_validation() {
        assert!(RankingRecord::new(vec![1.0], 0).is_err());
        assert!(RankingRecord::new(vec![1.0, f64::NAN], 0).is_err());
        assert!(RankingRecord::new(vec![1.0, 2.0], 2).is_err());
    }

    /// Full stable sort oracle: descending score, ties by index.
    fn sorted_rank(scores: &[f64], truth: usize) -> usize {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.iter().position(|&i| i == truth).unwrap() + 1
    }

    proptest! {
        #[test]
        fn rank_agrees_with_sort_oracle(
            scores in proptest::collection::vec(prop_oneof![Just(0.5f64), -3.0f64..3.0], 2..10),
            pick in any::<proptest::sample::Index>(),
        ) {
            let truth = pick.index(scores.len());
            let r = RankingRecord::new(scores.clone(), truth).unwrap();
            prop_assert_eq!(r.truth_rank(), sorted_rank(&scores, truth));
        }
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let rm = model(Dimension::VisualQuality);
        let mut rng = rng_from_seed(2);
        let mut sets = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..20 {
            let c = rng.random_range(0..3);
            let tpl = rm.template(c).unwrap();
            let set: Vec<Trajectory> = (0..6)
                .map(|_| {
                    let s = rng.random_range(0.01..0.5);
                    let v = tpl.values().iter().zip(normal_vec(&mut rng, 16)).map(|(a, z)| a + s * z).collect();
                    Trajectory::new(8, 2, v, c, None).unwrap()
                })
                .collect();
            truth.push(template_oracle(&set, rm.templates()).unwrap());
            sets.push(set);
        }
        let m = evaluate_reward_model(&rm, &sets, &truth).unwrap();
        assert_eq!(m, RankingMetrics { mrr: 1.0, recall_at_1: 1.0, recall_at_2: 1.0, recall_at_4: 1.0 });
    }

    #[test]
    fn small_sets_rejected() {
        let rm = model(Dimension::VisualQuality);
        let t = rm.template(0).unwrap().clone();
        let sets = vec![vec![t.clone(), t.clone(), t]];
        assert!(matches!(evaluate_reward_model(&rm, &sets, &[0]), Err(Error::Config(_))));
    }

    #[test]
    fn frame_wise_scorer_ignores_frame_order() {
        let rm = model(Dimension::VisualQuality);
        let fw = FrameWiseScorer::new(rm.templates().to_vec());
        let tpl = rm.template(0).unwrap();
        let mut frames: Vec<Vec<f64>> = tpl.frame_iter().map(<[f64]>::to_vec).collect();
        let a = Trajectory::from_frames(&frames, 0, None).unwrap();
        frames.swap(2, 5);
        let b = Trajectory::from_frames(&frames, 0, None).unwrap();
        let s = fw.score_set(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s[0], s[1]);
        assert!(temporal_consistency(&a) > temporal_consistency(&b));
    }

    #[test]
    fn metrics_csv_layout() {
        let m = RankingMetrics { mrr: 0.5, recall_at_1: 0.25, recall_at_2: 0.5, recall_at_4: 1.0 };
        let mut buf = Vec::new();
        write_metrics_csv(&[("temporal_consistency".into(), m)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "model,metric,value\ntemporal_consistency,mrr,0.5\ntemporal_consistency,recall@1,0.25\n\
             temporal_consistency,recall@2,0.5\ntemporal_consistency,recall@4,1\n"
        );
    }

    #[test]
    fn batch_splits_into_sets() {
        let t = line(4, [0.1, 0.0], [0.0, 0.0]);
        let sets = candidate_sets_from_batch(vec![t; 8], 4).unwrap();
        assert_eq!(sets.len(), 2);
        assert!(candidate_sets_from_batch(vec![], 3).is_ok());
        assert!(candidate_sets_from_batch(vec![line(4, [0.0; 2], [0.0; 2])], 3).is_err());
    }

    #[test]
    fn dimension_names_round_trip() {
        for d in Dimension::ALL {
            assert_eq!(d.as_str().parse::<Dimension>().unwrap(), d);
        }
        assert!("bogus".parse::<Dimension>().is_err());
    }
}
