//! DDPM machinery over trajectories.

mod denoiser;
mod schedule;
mod trajectory;

use std::cell::Cell;

use rand::Rng;

pub use denoiser::{timestep_embedding, Denoiser, DenoiserLayout};
pub use schedule::NoiseSchedule;
pub use trajectory::{
    read_batch_csv, read_jsonl, write_batch_csv, write_jsonl, Trajectory, MIN_FRAMES,
};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::{normal_vec, rng_from_seed};

/// Smallest cumulative alpha for which clean-sample prediction is attempted.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

thread_local! {
    static CHAINS_STARTED: Cell<u64> = const { Cell::new(0) };
}

/// Number of sampling chains started on the current thread.
pub fn sampler_calls() -> u64 {
    CHAINS_STARTED.with(Cell::get)
}

fn note_sampler_call() {
    CHAINS_STARTED.with(|c| c.set(c.get() + 1));
}

fn check_timestep(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t >= sched.len() {
        return Err(Error::Index(format!(
            "timestep {t} outside schedule of length {}",
            sched.len()
        )));
    }
    Ok(())
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_diffuse(
    x0: &Trajectory,
    t: usize,
    noise: &[f64],
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    check_timestep(t, sched)?;
    if noise.len() != x0.values().len() {
        return Err(shape_err(format!(
            "noise has {} values, trajectory {}",
            noise.len(),
            x0.values().len()
        )));
    }
    let ab = sched.alpha_bar()[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = x0.values().iter().zip(noise).map(|(x, e)| a * x + b * e).collect();
    Trajectory::new(x0.frames(), x0.dims(), values, x0.condition, None)
}

/// Inverts the forward process given a noise estimate:
/// `x0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn x0_from_noise(x_t: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_timestep(t, sched)?;
    if x_t.len() != eps.len() {
        return Err(shape_err("noise estimate does not match sample"));
    }
    let ab = sched.alpha_bar()[t];
    if ab < ALPHA_BAR_FLOOR {
        return Err(Error::Numeric(format!(
            "alpha_bar[{t}] = {ab:e} too small to predict a clean sample"
        )));
    }
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps).map(|(x, e)| (x - n * e) / s).collect())
}

pub fn predict_x0(
    d: &Denoiser,
    x_t: &Trajectory,
    t: usize,
    condition: usize,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    check_timestep(t, sched)?;
    let eps = d.predict_noise(x_t.values(), t, condition)?;
    let values = x0_from_noise(x_t.values(), &eps, t, sched)?;
    Trajectory::new(x_t.frames(), x_t.dims(), values, condition, None)
}

/// Descending, uniformly strided subsequence of `steps` timesteps from `T-1` to `0`.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(config_err(format!(
            "sampler steps must be in 1..={total}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![total - 1]);
    }
    let last = (total - 1) as f64;
    let span = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| (last * (steps - 1 - i) as f64 / span).round() as usize)
        .collect())
}

/// Standard-normal chain head `x_T`.
pub fn sample_prior<R: Rng + ?Sized>(layout: &DenoiserLayout, rng: &mut R) -> Vec<f64> {
    normal_vec(rng, layout.sample_width())
}

/// One ancestral update from timestep `t` to `prev` (`None` = the clean sample).
/// Fresh noise with the posterior variance is added unless `prev` is `None`.
pub fn ancestral_step<R: Rng + ?Sized>(
    d: &Denoiser,
    x_t: &[f64],
    t: usize,
    prev: Option<usize>,
    condition: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_timestep(t, sched)?;
    let eps = d.predict_noise(x_t, t, condition)?;
    let x0 = x0_from_noise(x_t, &eps, t, sched)?;
    let ab_t = sched.alpha_bar()[t];
    let Some(prev) = prev else {
        return Ok(x0);
    };
    if prev >= t {
        return Err(config_err(format!("ancestral step must descend, got {t} -> {prev}")));
    }
    let ab_prev = sched.alpha_bar()[prev];
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
    let z = normal_vec(rng, x_t.len());
    Ok(x0
        .iter()
        .zip(x_t)
        .zip(&z)
        .map(|((x0, xt), z)| c0 * x0 + ct * xt + sigma * z)
        .collect())
}

/// Runs the chain from a fresh prior draw through `timesteps[..stop]` and returns
/// the state at `timesteps[stop]` (or the clean sample if `stop == len`).
pub(crate) fn run_chain<R: Rng + ?Sized>(
    d: &Denoiser,
    condition: usize,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    stop: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    note_sampler_call();
    let mut x = sample_prior(d.layout(), rng);
    for i in 0..stop.min(timesteps.len()) {
        let prev = timesteps.get(i + 1).copied();
        x = ancestral_step(d, &x, timesteps[i], prev, condition, sched, rng)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite values".into()));
    }
    Ok(x)
}

pub fn sample_with_rng<R: Rng + ?Sized>(
    d: &Denoiser,
    condition: usize,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if d.layout().frames * d.layout().dims == 0 {
        return Err(shape_err("empty denoiser layout"));
    }
    let timesteps = strided_timesteps(sched.len(), steps)?;
    let x = run_chain(d, condition, sched, &timesteps, timesteps.len(), rng)?;
    Trajectory::new(d.layout().frames, d.layout().dims, x, condition, None)
}

/// Ancestral DDPM sample, deterministic in `seed`.
pub fn sample(
    d: &Denoiser,
    condition: usize,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut t = sample_with_rng(d, condition, sched, steps, &mut rng_from_seed(seed))?;
    t.seed = Some(seed);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;

    fn tiny_layout() -> DenoiserLayout {
        DenoiserLayout {
            frames: 4,
            dims: 2,
            classes: 2,
            time_embed_width: 4,
            hidden: vec![8],
        }
    }

    fn traj(values: Vec<f64>) -> Trajectory {
        let n = values.len();
        Trajectory::new(n, 1, values, 0, None).unwrap()
    }

    #[test]
    fn zero_noise_scales_by_root_alpha_bar() {
        let s = NoiseSchedule::default();
        let x0 = traj(vec![1.0, -2.0, 0.5]);
        let xt = forward_diffuse(&x0, 10, &[0.0; 3], &s).unwrap();
        let a = s.alpha_bar()[10].sqrt();
        assert_eq!(xt.values(), &[a, -2.0 * a, 0.5 * a]);
    }

    #[test]
    fn quarter_alpha_bar_scalar_case() {
        // abar_1 = 0.5 * 0.5 = 0.25
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let x0 = traj(vec![2.0, 2.0, 2.0]);
        let xt = forward_diffuse(&x0, 1, &[1.0; 3], &s).unwrap();
        let expected = 0.5 * 2.0 + 0.75f64.sqrt();
        assert!(xt.values().iter().all(|v| (v - expected).abs() < 1e-15));
        assert!((expected - 1.8660).abs() < 1e-4);
        let x0_hat = x0_from_noise(xt.values(), &[1.0; 3], 1, &s).unwrap();
        assert!(x0_hat.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn tiny_beta_keeps_sample_close() {
        let s = NoiseSchedule::linear(10, 1e-8, 0.1).unwrap();
        let x0 = traj(vec![0.3, 0.1, -0.2]);
        let noise = [1.0, -0.5, 2.0];
        let xt = forward_diffuse(&x0, 0, &noise, &s).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ab = s.alpha_bar()[0];
        let bound = (1.0 - ab).sqrt() * norm(&noise) + (1.0 - ab.sqrt()) * norm(x0.values());
        let dist: f64 = xt.values().iter().zip(x0.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= bound + 1e-12);
    }

    #[test]
    fn out_of_range_timestep() {
        let s = NoiseSchedule::default();
        let x0 = traj(vec![0.0; 3]);
        assert!(matches!(forward_diffuse(&x0, 50, &[0.0; 3], &s), Err(Error::Index(_))));
    }

    #[test]
    fn zero_noise_estimate_rescales() {
        let s = NoiseSchedule::default();
        let x = [0.4, -0.8];
        let out = x0_from_noise(&x, &[0.0, 0.0], 20, &s).unwrap();
        let r = s.alpha_bar()[20].sqrt();
        assert_eq!(out, vec![0.4 / r, -0.8 / r]);
    }

    #[test]
    fn vanishing_alpha_bar_guarded() {
        let s = NoiseSchedule::linear(60, 0.5, 0.9).unwrap();
        assert!(s.alpha_bar()[59] < ALPHA_BAR_FLOOR);
        assert!(matches!(x0_from_noise(&[0.0], &[0.0], 59, &s), Err(Error::Numeric(_))));
    }

    #[test]
    fn strided_sequence_shape() {
        assert_eq!(strided_timesteps(50, 50).unwrap(), (0..50).rev().collect::<Vec<_>>());
        let s = strided_timesteps(50, 30).unwrap();
        assert_eq!(s.len(), 30);
        assert_eq!((s[0], s[29]), (49, 0));
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(strided_timesteps(50, 1).unwrap(), vec![49]);
        assert!(matches!(strided_timesteps(50, 51), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_seed_deterministic_and_finite() {
        let d = Denoiser::init(tiny_layout(), &mut rng_from_seed(2)).unwrap();
        let s = NoiseSchedule::default();
        let a = sample(&d, 1, &s, 30, 99).unwrap();
        let b = sample(&d, 1, &s, 30, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.frames(), a.dims()), (4, 2));
        assert_eq!(a.seed, Some(99));
        for steps in [50, 25] {
            let t = sample(&d, 0, &s, steps, 5).unwrap();
            assert!(t.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn prior_draws_are_standard_normal() {
        let layout = tiny_layout();
        let n = 10_000;
        let width = layout.sample_width();
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for i in 0..n {
            let x = sample_prior(&layout, &mut derived_rng(7, 0, i));
            for k in 0..width {
                sum[k] += x[k];
                sq[k] += x[k] * x[k];
            }
        }
        for k in 0..width {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn sampler_call_counter_advances() {
        let d = Denoiser::init(tiny_layout(), &mut rng_from_seed(2)).unwrap();
        let before = sampler_calls();
        sample(&d, 0, &NoiseSchedule::default(), 5, 1).unwrap();
        assert_eq!(sampler_calls(), before + 1);
    }
}
