//! Online video preference optimization: sample candidates from the current
//! policy, rank them with the reward model, take a DPO step on the best/worst
//! pair, and refresh the reference every `K` steps.

use super::dpo::dpo_loss_batch;
use super::metrics::{EvalHook, StepRecord, TrainRunMetrics};
use super::{PairSource, PreferencePair, VpoConfig, MAX_CONSECUTIVE_SKIPS};
use crate::diffusion::{sample, Denoiser, NoiseSchedule, Trajectory};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{AdamConfig, AdamState};
use crate::rewards::{Dimension, RewardModel, RewardVector};
use crate::rng::{derive_seed, derived_rng, tag};

/// `n` independent samples for condition `c`; candidate `i` uses the
/// substream `derive_seed(seed, CANDIDATE, i)`.
pub fn generate_candidates(
    policy: &Denoiser,
    condition: usize,
    n: usize,
    sampler_steps: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n < 2 {
        return Err(config_err("need at least 2 candidates"));
    }
    (0..n as u64)
        .map(|i| sample(policy, condition, sched, sampler_steps, derive_seed(seed, tag::CANDIDATE, i)))
        .collect()
}

/// `(argmax, argmin)` with ties to the lowest index; `None` when all scores
/// are equal.
pub fn select_indices(scores: &[f64]) -> Result<Option<(usize, usize)>> {
    if scores.len() < 2 {
        return Err(shape_err("selection needs at least 2 scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite candidate score".into()));
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    Ok((scores[best] != scores[worst]).then_some((best, worst)))
}

pub fn select_pair(
    candidates: &[Trajectory],
    scores: &[f64],
    rewards: &[RewardVector],
    source: PairSource,
) -> Result<Option<PreferencePair>> {
    if candidates.len() != scores.len() || rewards.len() != scores.len() {
        return Err(shape_err(format!(
            "{} candidates, {} scores, {} reward vectors",
            candidates.len(),
            scores.len(),
            rewards.len()
        )));
    }
    Ok(select_indices(scores)?.map(|(w, l)| PreferencePair {
        condition: candidates[w].condition,
        winner: candidates[w].clone(),
        loser: candidates[l].clone(),
        source,
        winner_score: scores[w],
        loser_score: scores[l],
        winner_rewards: rewards[w],
        loser_rewards: rewards[l],
    }))
}

pub(crate) fn mean_rewards(rewards: &[RewardVector]) -> RewardVector {
    let n = rewards.len() as f64;
    let mut out = RewardVector::default();
    for r in rewards {
        for d in Dimension::ALL {
            *out.get_mut(d) += r.get(d) / n;
        }
    }
    out
}

/// Turns a candidate set into selection scores plus raw reward vectors.
pub trait Ranker {
    fn rank(&self, candidates: &[Trajectory]) -> Result<(Vec<f64>, Vec<RewardVector>)>;
}

impl Ranker for RewardModel {
    fn rank(&self, candidates: &[Trajectory]) -> Result<(Vec<f64>, Vec<RewardVector>)> {
        let scored = self.score_candidates(candidates)?;
        let selection = scored.iter().map(|r| r.get(self.dimension)).collect();
        let raw = scored
            .into_iter()
            .map(|r| RewardVector {
                global: r.raw().iter().sum::<f64>() / 4.0,
                ..r
            })
            .collect();
        Ok((selection, raw))
    }
}

/// Generates, scores and selects one pair. Returns the pair (if any) and the
/// candidates' mean raw rewards.
pub(crate) fn collect_pair(
    policy: &Denoiser,
    ranker: &dyn Ranker,
    condition: usize,
    sched: &NoiseSchedule,
    cfg: &VpoConfig,
    index: usize,
    source: PairSource,
) -> Result<(Option<PreferencePair>, RewardVector)> {
    let seed = derive_seed(cfg.seed, tag::CANDIDATE, index as u64);
    let candidates = generate_candidates(policy, condition, cfg.candidates, cfg.sampler_steps, sched, seed)?;
    let (selection, raw) = ranker.rank(&candidates)?;
    let pair = select_pair(&candidates, &selection, &raw, source)?;
    Ok((pair, mean_rewards(&raw)))
}

/// Runs the online trainer in place on `policy`. The reference starts as a
/// copy of the incoming policy.
pub fn train_online_vpo(
    policy: &mut Denoiser,
    rm: &RewardModel,
    prompts: &[usize],
    sched: &NoiseSchedule,
    cfg: &VpoConfig,
    eval: Option<&EvalHook<'_>>,
) -> Result<TrainRunMetrics> {
    let rm = rm.with_dimension(cfg.dimension);
    train_online_with(policy, &rm, prompts, sched, cfg, eval)
}

pub fn train_online_with(
    policy: &mut Denoiser,
    ranker: &dyn Ranker,
    prompts: &[usize],
    sched: &NoiseSchedule,
    cfg: &VpoConfig,
    eval: Option<&EvalHook<'_>>,
) -> Result<TrainRunMetrics> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(config_err("prompt set is empty"));
    }
    let mut reference = policy.clone();
    let mut adam = AdamState::new(policy.net(), AdamConfig::with_lr(cfg.lr));
    let mut tape = policy.net().new_tape();
    let mut metrics = TrainRunMetrics::default();
    let mut skip_run = 0;
    metrics.maybe_eval(eval, 0, cfg.steps, policy)?;

    for step in 1..=cfg.steps {
        let condition = prompts[(step - 1) % prompts.len()];
        let (pair, candidate_mean) =
            collect_pair(policy, ranker, condition, sched, cfg, step, PairSource::Online { step })?;
        let (loss, gap) = match pair {
            Some(pair) => {
                skip_run = 0;
                let mut rng = derived_rng(cfg.seed, tag::LOSS, step as u64);
                let out = dpo_loss_batch(
                    policy,
                    &reference,
                    &pair,
                    cfg.beta,
                    sched,
                    cfg.batch_size,
                    &mut rng,
                    &mut tape,
                )?;
                adam.step(policy.net_mut(), &mut tape)?;
                (Some(out.loss), Some(pair.winner_score - pair.loser_score))
            }
            None => {
                skip_run += 1;
                if skip_run >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::DegeneratePolicy(format!(
                        "{skip_run} consecutive candidate sets with identical scores (step {step})"
                    )));
                }
                (None, None)
            }
        };
        let ref_update = step % cfg.k_interval == 0;
        if ref_update {
            reference = policy.clone();
            metrics.ref_updates.push(step);
        }
        metrics.steps.push(StepRecord {
            step,
            loss,
            candidate_mean,
            gap,
            ref_update,
        });
        metrics.maybe_eval(eval, step, cfg.steps, policy)?;
    }
    Ok(metrics)
}
