use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::{forward_diffuse, Denoiser, NoiseSchedule};
use crate::error::{config_err, Error, Result};
use crate::nn::{AdamConfig, AdamState, ForwardCache};
use crate::rng::{derived_rng, normal_vec, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// DDPM noise-prediction training: per item draw `t ~ U[0, T)` and
/// `eps ~ N(0, I)` and minimize `|eps - eps_theta(x_t, t, c)|^2`, averaged over
/// minibatches. Returns the mean loss of each epoch.
pub fn pretrain(
    denoiser: &mut Denoiser,
    dataset: &Dataset,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(config_err("pretraining dataset is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(config_err("pretraining needs a positive batch size and learning rate"));
    }
    let mut adam = AdamState::new(denoiser.net(), AdamConfig::with_lr(cfg.lr));
    let mut tape = denoiser.net().new_tape();
    let mut cache = ForwardCache::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = derived_rng(cfg.seed, tag::PRETRAIN, epoch as u64);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x0 = &dataset.items[i];
                let t = rng.random_range(0..sched.len());
                let eps = normal_vec(&mut rng, x0.values().len());
                let xt = forward_diffuse(x0, t, &eps, sched)?;
                let pred = denoiser.predict_noise_cached(xt.values(), t, x0.condition, &mut cache)?;
                let loss: f64 = pred.iter().zip(&eps).map(|(p, e)| (e - p).powi(2)).sum();
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "pretraining loss diverged in epoch {epoch}"
                    )));
                }
                total += loss;
                let upstream: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| 2.0 * scale * (p - e)).collect();
                denoiser.backward(&cache, &upstream, &mut tape)?;
            }
            adam.step(denoiser.net_mut(), &mut tape)?;
        }
        epoch_losses.push(total / dataset.len() as f64);
    }
    Ok(epoch_losses)
}
