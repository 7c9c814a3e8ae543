//! Diffusion-DPO loss.
//!
//! The sequence likelihood ratio `log pi_theta(y|c) / pi_ref(y|c)` is replaced by
//! the per-timestep noise-prediction error difference. Winner and loser share
//! one timestep `t` and one noise draw `eps`, and policy and reference see the
//! same noised inputs:
//!
//! ```text
//! h    = -(beta / 2) [ (|eps - eps_theta(x_t^w)|^2 - |eps - eps_ref(x_t^w)|^2)
//!                    - (|eps - eps_theta(x_t^l)|^2 - |eps - eps_ref(x_t^l)|^2) ]
//! loss = -log sigmoid(h) = softplus(-h)
//! ```

use rand::Rng;

use super::PreferencePair;
use crate::diffusion::{forward_diffuse, Denoiser, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ForwardCache, GradientTape};
use crate::rng::normal_vec;

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Margin `h` and loss from the four squared errors.
pub fn dpo_objective(
    policy_winner: f64,
    reference_winner: f64,
    policy_loser: f64,
    reference_loser: f64,
    beta: f64,
) -> (f64, f64) {
    let h = -(beta / 2.0)
        * ((policy_winner - reference_winner) - (policy_loser - reference_loser));
    (h, softplus(-h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    /// Implicit reward margin `h`.
    pub margin: f64,
}

fn sq_err(eps: &[f64], pred: &[f64]) -> f64 {
    eps.iter().zip(pred).map(|(e, p)| (e - p).powi(2)).sum()
}

/// Loss at a fixed timestep and noise draw. Gradients with respect to the
/// policy parameters are added to `tape` when given.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss_at(
    policy: &Denoiser,
    reference: &Denoiser,
    pair: &PreferencePair,
    beta: f64,
    sched: &NoiseSchedule,
    t: usize,
    noise: &[f64],
    tape: Option<&mut GradientTape>,
) -> Result<DpoLoss> {
    if !pair.winner.same_shape(&pair.loser) {
        return Err(shape_err("winner and loser shapes differ"));
    }
    let c = pair.condition;
    let xw = forward_diffuse(&pair.winner, t, noise, sched)?;
    let xl = forward_diffuse(&pair.loser, t, noise, sched)?;
    let mut cache_w = ForwardCache::default();
    let mut cache_l = ForwardCache::default();
    let pw = policy.predict_noise_cached(xw.values(), t, c, &mut cache_w)?;
    let pl = policy.predict_noise_cached(xl.values(), t, c, &mut cache_l)?;
    let rw = reference.predict_noise(xw.values(), t, c)?;
    let rl = reference.predict_noise(xl.values(), t, c)?;
    let (h, loss) = dpo_objective(
        sq_err(noise, &pw),
        sq_err(noise, &rw),
        sq_err(noise, &pl),
        sq_err(noise, &rl),
        beta,
    );
    if !h.is_finite() || !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite DPO margin {h} at timestep {t} (beta {beta})"
        )));
    }
    if let Some(tape) = tape {
        // d loss / d h = -sigmoid(-h); d h / d E_theta^w = -beta/2, d h / d E_theta^l = beta/2.
        let s = sigmoid(-h) * beta;
        let up_w: Vec<f64> = pw.iter().zip(noise).map(|(p, e)| s * (p - e)).collect();
        let up_l: Vec<f64> = pl.iter().zip(noise).map(|(p, e)| -s * (p - e)).collect();
        policy.backward(&cache_w, &up_w, tape)?;
        policy.backward(&cache_l, &up_l, tape)?;
    }
    Ok(DpoLoss { loss, margin: h })
}

/// Draws a shared `t ~ U[0, T)` and `eps ~ N(0, I)` from `rng` and evaluates
/// the loss, accumulating policy gradients into `tape` when given.
pub fn dpo_loss<R: Rng + ?Sized>(
    policy: &Denoiser,
    reference: &Denoiser,
    pair: &PreferencePair,
    beta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
    tape: Option<&mut GradientTape>,
) -> Result<DpoLoss> {
    let t = rng.random_range(0..sched.len());
    let noise = normal_vec(rng, pair.winner.values().len());
    dpo_loss_at(policy, reference, pair, beta, sched, t, &noise, tape)
}

/// Mean loss over `draws` independent draws; the tape receives the mean gradient.
pub(crate) fn dpo_loss_batch<R: Rng + ?Sized>(
    policy: &Denoiser,
    reference: &Denoiser,
    pair: &PreferencePair,
    beta: f64,
    sched: &NoiseSchedule,
    draws: usize,
    rng: &mut R,
    tape: &mut GradientTape,
) -> Result<DpoLoss> {
    let mut total = DpoLoss {
        loss: 0.0,
        margin: 0.0,
    };
    let mut draw_tape = tape.clone();
    draw_tape.zero();
    for _ in 0..draws {
        let out = dpo_loss(policy, reference, pair, beta, sched, rng, Some(&mut draw_tape))?;
        total.loss += out.loss;
        total.margin += out.margin;
    }
    let scale = 1.0 / draws as f64;
    draw_tape.scale(scale);
    for (acc, g) in tape.values_mut().zip(draw_tape.values()) {
        *acc += g;
    }
    tape.count += draw_tape.count;
    total.loss *= scale;
    total.margin *= scale;
    Ok(total)
}
