//! Reward feedback learning: run the sampler down to a random late timestep,
//! predict the clean sample in one shot and ascend the reward on it. The
//! gradient flows through the clean-sample prediction and the final denoiser
//! call only; the chain state `x_t` is treated as a constant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{EvalHook, StepRecord, TrainRunMetrics};
use super::online::mean_rewards;
use crate::diffusion::{run_chain, strided_timesteps, x0_from_noise, Denoiser, NoiseSchedule, Trajectory};
use crate::error::{config_err, Error, Result};
use crate::nn::{AdamConfig, AdamState, ForwardCache, GradientTape};
use crate::rewards::{Dimension, RewardModel, RewardVector};
use crate::rng::{derived_rng, tag};

/// A reward that can be differentiated with respect to the trajectory values.
pub trait DifferentiableReward {
    fn value_and_grad(&self, y: &Trajectory, condition: usize) -> Result<(f64, Vec<f64>)>;
}

impl DifferentiableReward for RewardModel {
    fn value_and_grad(&self, y: &Trajectory, condition: usize) -> Result<(f64, Vec<f64>)> {
        RewardModel::value_and_grad(self, y, condition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflConfig {
    pub steps: usize,
    /// Chains per optimization step.
    pub batch_size: usize,
    pub sampler_steps: usize,
    /// Half-open timestep window `[lo, hi)` for the reward evaluation; `None`
    /// selects the lowest-noise 30% of the chain.
    pub t_range: Option<[usize; 2]>,
    pub dimension: Dimension,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ReflConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            sampler_steps: 30,
            t_range: None,
            dimension: Dimension::TemporalConsistency,
            lr: 1e-4,
            seed: 0,
        }
    }
}

impl ReflConfig {
    pub fn window(&self, sched: &NoiseSchedule) -> Result<[usize; 2]> {
        let w = self
            .t_range
            .unwrap_or([0, (0.3 * sched.len() as f64).ceil() as usize]);
        if w[0] >= w[1] || w[1] > sched.len() {
            return Err(config_err(format!(
                "ReFL timestep window {w:?} not inside [0, {})",
                sched.len()
            )));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflStep {
    /// Mean of `-reward` over the batch.
    pub loss: f64,
    pub predictions: Vec<Trajectory>,
}

/// `-reward(x0_hat)` for a fixed chain state; accumulates policy gradients
/// into `tape` when given.
#[allow(clippy::too_many_arguments)]
pub fn refl_loss_at(
    policy: &Denoiser,
    reward: &dyn DifferentiableReward,
    condition: usize,
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    tape: Option<&mut GradientTape>,
    upstream_scale: f64,
) -> Result<(f64, Trajectory)> {
    let mut cache = ForwardCache::default();
    let eps = policy.predict_noise_cached(x_t, t, condition, &mut cache)?;
    let x0 = x0_from_noise(x_t, &eps, t, sched)?;
    let layout = policy.layout();
    let x0 = Trajectory::new(layout.frames, layout.dims, x0, condition, None)?;
    let (r, grad) = reward.value_and_grad(&x0, condition)?;
    let loss = -r;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite ReFL loss at timestep {t}")));
    }
    if let Some(tape) = tape {
        // d x0 / d eps = -sqrt(1 - abar) / sqrt(abar), so d(-r)/d eps = grad * ratio.
        let ab = sched.alpha_bar()[t];
        let ratio = ((1.0 - ab) / ab).sqrt() * upstream_scale;
        let upstream: Vec<f64> = grad.iter().map(|g| g * ratio).collect();
        policy.backward(&cache, &upstream, tape)?;
    }
    Ok((loss, x0))
}

/// One ReFL update over `cfg.batch_size` chains.
pub fn refl_step<R: Rng + ?Sized>(
    policy: &mut Denoiser,
    adam: &mut AdamState,
    reward: &dyn DifferentiableReward,
    condition: usize,
    sched: &NoiseSchedule,
    cfg: &ReflConfig,
    rng: &mut R,
) -> Result<ReflStep> {
    let [lo, hi] = cfg.window(sched)?;
    let timesteps = strided_timesteps(sched.len(), cfg.sampler_steps)?;
    let eligible: Vec<usize> = (0..timesteps.len())
        .filter(|&k| (lo..hi).contains(&timesteps[k]))
        .collect();
    if eligible.is_empty() {
        return Err(config_err(format!(
            "no sampler timestep falls in the ReFL window [{lo}, {hi})"
        )));
    }
    let mut tape = policy.net().new_tape();
    let scale = 1.0 / cfg.batch_size as f64;
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let k = eligible[rng.random_range(0..eligible.len())];
        let x_t = run_chain(policy, condition, sched, &timesteps, k, rng)?;
        let (l, x0) = refl_loss_at(policy, reward, condition, &x_t, timesteps[k], sched, Some(&mut tape), scale)?;
        loss += l * scale;
        predictions.push(x0);
    }
    adam.step(policy.net_mut(), &mut tape)?;
    Ok(ReflStep { loss, predictions })
}

pub fn train_refl(
    policy: &mut Denoiser,
    rm: &RewardModel,
    prompts: &[usize],
    sched: &NoiseSchedule,
    cfg: &ReflConfig,
    eval: Option<&EvalHook<'_>>,
) -> Result<TrainRunMetrics> {
    if prompts.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(config_err("ReFL needs prompts, steps and a batch size"));
    }
    cfg.window(sched)?;
    let rm = rm.with_dimension(cfg.dimension);
    let mut adam = AdamState::new(policy.net(), AdamConfig::with_lr(cfg.lr));
    let mut metrics = TrainRunMetrics::default();
    metrics.maybe_eval(eval, 0, cfg.steps, policy)?;
    for step in 1..=cfg.steps {
        let condition = prompts[(step - 1) % prompts.len()];
        let mut rng = derived_rng(cfg.seed, tag::REFL, step as u64);
        let out = refl_step(policy, &mut adam, &rm, condition, sched, cfg, &mut rng)?;
        let rewards: Vec<RewardVector> = out
            .predictions
            .iter()
            .map(|y| rm.score(y, condition))
            .collect::<Result<_>>()?;
        metrics.steps.push(StepRecord {
            step,
            loss: Some(out.loss),
            candidate_mean: mean_rewards(&rewards),
            gap: None,
            ref_update: false,
        });
        metrics.maybe_eval(eval, step, cfg.steps, policy)?;
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserLayout;
    use crate::rng::{normal_vec, rng_from_seed};

    struct Constant;

    impl DifferentiableReward for Constant {
        fn value_and_grad(&self, y: &Trajectory, _: usize) -> Result<(f64, Vec<f64>)> {
            Ok((3.0, vec![0.0; y.values().len()]))
        }
    }

    /// `-|x|^2`
    struct NegSquaredNorm;

    impl DifferentiableReward for NegSquaredNorm {
        fn value_and_grad(&self, y: &Trajectory, _: usize) -> Result<(f64, Vec<f64>)> {
            let v = y.values();
            Ok((-v.iter().map(|x| x * x).sum::<f64>(), v.iter().map(|x| -2.0 * x).collect()))
        }
    }

    fn denoiser() -> Denoiser {
        let layout = DenoiserLayout {
            frames: 5,
            dims: 2,
            classes: 2,
            time_embed_width: 4,
            hidden: vec![12],
        };
        Denoiser::init(layout, &mut rng_from_seed(6)).unwrap()
    }

    #[test]
    fn constant_reward_leaves_policy_unchanged() {
        let mut d = denoiser();
        let before = d.clone();
        let mut adam = AdamState::new(d.net(), AdamConfig::default());
        let cfg = ReflConfig { sampler_steps: 10, ..ReflConfig::default() };
        let out = refl_step(&mut d, &mut adam, &Constant, 1, &NoiseSchedule::default(), &cfg, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.loss, -3.0);
        assert_eq!(d, before);
    }

    #[test]
    fn gradient_through_clean_prediction_matches_finite_differences() {
        let d = denoiser();
        let s = NoiseSchedule::default();
        let x_t = normal_vec(&mut rng_from_seed(2), 10);
        let t = 9;
        let mut tape = d.net().new_tape();
        refl_loss_at(&d, &NegSquaredNorm, 0, &x_t, t, &s, Some(&mut tape), 1.0).unwrap();
        let h = 1e-5;
        for (i, analytic) in tape.values().enumerate() {
            let f = |delta: f64| {
                let mut q = d.clone();
                *q.net_mut().params_mut().nth(i).unwrap() += delta;
                refl_loss_at(&q, &NegSquaredNorm, 0, &x_t, t, &s, None, 1.0).unwrap().0
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            let err = (analytic - numeric).abs();
            assert!(err <= 1e-7 || err <= 1e-4 * analytic.abs().max(numeric.abs()),
                "param {i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn default_window_is_late_chain() {
        let cfg = ReflConfig::default();
        assert_eq!(cfg.window(&NoiseSchedule::default()).unwrap(), [0, 15]);
        let bad = ReflConfig { t_range: Some([10, 60]), ..ReflConfig::default() };
        assert!(bad.window(&NoiseSchedule::default()).is_err());
    }
}
