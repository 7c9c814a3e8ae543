//! Offline DPO: preference pairs are collected once from a frozen policy and
//! then replayed against a fixed reference.

use rand::seq::SliceRandom;

use super::dpo::dpo_loss_batch;
use super::metrics::{EvalHook, StepRecord, TrainRunMetrics};
use super::online::{collect_pair, mean_rewards};
use super::{PairSource, PreferencePair, VpoConfig, MAX_CONSECUTIVE_SKIPS};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{config_err, Error, Result};
use crate::nn::{AdamConfig, AdamState};
use crate::rewards::RewardModel;
use crate::rng::{derived_rng, tag};

/// Collects `count` pairs with the online generate/score/select pipeline,
/// cycling through `prompts`. Attempt `a` (1-based) draws its candidates from
/// the same substream as online step `a`, so with matching seeds the first
/// pair equals the online trainer's first pair.
pub fn build_offline_dataset(
    policy: &Denoiser,
    rm: &RewardModel,
    prompts: &[usize],
    count: usize,
    sched: &NoiseSchedule,
    cfg: &VpoConfig,
) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    if prompts.is_empty() || count == 0 {
        return Err(config_err("offline dataset needs prompts and a positive pair count"));
    }
    let rm = rm.with_dimension(cfg.dimension);
    let mut pairs = Vec::with_capacity(count);
    let mut skip_run = 0;
    let mut attempt = 0;
    while pairs.len() < count {
        attempt += 1;
        let condition = prompts[(attempt - 1) % prompts.len()];
        let source = PairSource::Offline {
            dataset_id: cfg.seed,
            attempt,
        };
        match collect_pair(policy, &rm, condition, sched, cfg, attempt, source)?.0 {
            Some(pair) => {
                skip_run = 0;
                pairs.push(pair);
            }
            None => {
                skip_run += 1;
                if skip_run >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::DegeneratePolicy(format!(
                        "{skip_run} consecutive uninformative candidate sets while building the dataset"
                    )));
                }
            }
        }
    }
    Ok(pairs)
}

/// Standard DPO over a fixed pair set: one pair per step, reshuffled each
/// epoch, reference frozen at the incoming policy. Never samples from the
/// policy (the optional eval hook aside).
pub fn train_offline_dpo(
    policy: &mut Denoiser,
    dataset: &[PreferencePair],
    sched: &NoiseSchedule,
    cfg: &VpoConfig,
    eval: Option<&EvalHook<'_>>,
) -> Result<TrainRunMetrics> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(config_err("offline dataset is empty"));
    }
    let reference = policy.clone();
    let mut adam = AdamState::new(policy.net(), AdamConfig::with_lr(cfg.lr));
    let mut tape = policy.net().new_tape();
    let mut metrics = TrainRunMetrics::default();
    metrics.maybe_eval(eval, 0, cfg.steps, policy)?;

    let mut order: Vec<usize> = Vec::new();
    for step in 1..=cfg.steps {
        let pos = (step - 1) % dataset.len();
        if pos == 0 {
            let epoch = ((step - 1) / dataset.len()) as u64;
            order = (0..dataset.len()).collect();
            order.shuffle(&mut derived_rng(cfg.seed, tag::SHUFFLE, epoch));
        }
        let pair = &dataset[order[pos]];
        let mut rng = derived_rng(cfg.seed, tag::LOSS, step as u64);
        let out = dpo_loss_batch(
            policy,
            &reference,
            pair,
            cfg.beta,
            sched,
            cfg.batch_size,
            &mut rng,
            &mut tape,
        )?;
        adam.step(policy.net_mut(), &mut tape)?;
        metrics.steps.push(StepRecord {
            step,
            loss: Some(out.loss),
            candidate_mean: mean_rewards(&[pair.winner_rewards, pair.loser_rewards]),
            gap: Some(pair.winner_score - pair.loser_score),
            ref_update: false,
        });
        metrics.maybe_eval(eval, step, cfg.steps, policy)?;
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sampler_calls, DenoiserLayout};
    use crate::rewards::Dimension;
    use crate::rng::rng_from_seed;
    use crate::trainers::train_online_vpo;
    use std::f64::consts::LN_2;

    fn setup() -> (Denoiser, RewardModel, NoiseSchedule) {
        let layout = DenoiserLayout {
            frames: 6,
            dims: 2,
            classes: 3,
            time_embed_width: 4,
            hidden: vec![16],
        };
        let d = Denoiser::init(layout, &mut rng_from_seed(3)).unwrap();
        let specs = crate::data::make_class_specs(3, 2, 0).unwrap();
        let rm = RewardModel::from_specs(Dimension::TemporalConsistency, &specs, 6, 2).unwrap();
        (d, rm, NoiseSchedule::default())
    }

    fn cfg() -> VpoConfig {
        VpoConfig {
            steps: 6,
            sampler_steps: 4,
            seed: 11,
            ..VpoConfig::default()
        }
    }

    #[test]
    fn dataset_is_reproducible_and_ordered() {
        let (d, rm, s) = setup();
        let a = build_offline_dataset(&d, &rm, &[0, 1, 2], 5, &s, &cfg()).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|p| p.winner_score >= p.loser_score));
        assert_eq!(a, build_offline_dataset(&d, &rm, &[0, 1, 2], 5, &s, &cfg()).unwrap());
    }

    #[test]
    fn offline_training_never_samples() {
        let (mut d, rm, s) = setup();
        let data = build_offline_dataset(&d, &rm, &[0, 1], 3, &s, &cfg()).unwrap();
        let frozen = data.clone();
        let before = sampler_calls();
        let m = train_offline_dpo(&mut d, &data, &s, &cfg(), None).unwrap();
        assert_eq!(sampler_calls(), before);
        assert_eq!(data, frozen);
        assert!((m.steps[0].loss.unwrap() - LN_2).abs() < 1e-12);
        assert_eq!(m.steps.len(), 6);
        assert!(m.ref_updates.is_empty());
    }

    #[test]
    fn one_step_matches_online_trainer() {
        let (d, rm, s) = setup();
        let one = VpoConfig {
            steps: 1,
            k_interval: usize::MAX,
            ..cfg()
        };
        let mut online = d.clone();
        let m_on = train_online_vpo(&mut online, &rm, &[2], &s, &one, None).unwrap();

        let data = build_offline_dataset(&d, &rm, &[2], 1, &s, &one).unwrap();
        let mut offline = d.clone();
        let m_off = train_offline_dpo(&mut offline, &data, &s, &one, None).unwrap();

        assert_eq!(online, offline);
        assert_eq!(m_on.steps[0].loss, m_off.steps[0].loss);
        assert_eq!(m_on.steps[0].gap, m_off.steps[0].gap);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (mut d, _, s) = setup();
        assert!(matches!(train_offline_dpo(&mut d, &[], &s, &cfg(), None), Err(Error::Config(_))));
    }
}
