use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::diffusion::{sample, Denoiser, NoiseSchedule, Trajectory};
use crate::error::{config_err, Error, Result};
use crate::rewards::{template_oracle, RewardModel, RewardStats, RewardVector};
use crate::rng::{derive_seed, derived_rng, normal_vec, tag};

/// Anything that produces one trajectory per (condition, seed).
pub trait Generator: Sync {
    fn generate(&self, condition: usize, seed: u64) -> Result<Trajectory>;
}

/// Ancestral sampling from a policy.
pub struct PolicySampler<'a> {
    pub policy: &'a Denoiser,
    pub sched: &'a NoiseSchedule,
    pub steps: usize,
}

impl Generator for PolicySampler<'_> {
    fn generate(&self, condition: usize, seed: u64) -> Result<Trajectory> {
        sample(self.policy, condition, self.sched, self.steps, seed)
    }
}

/// The data-generating process without noise: always returns the class template.
pub struct TemplateOracle {
    pub templates: Vec<Trajectory>,
}

impl Generator for TemplateOracle {
    fn generate(&self, condition: usize, seed: u64) -> Result<Trajectory> {
        let mut t = self
            .templates
            .get(condition)
            .ok_or_else(|| Error::Index(format!("no template for class {condition}")))?
            .clone();
        t.seed = Some(seed);
        Ok(t)
    }
}

/// Draws `n` trajectories per prompt and reports per-dimension statistics
/// (global is the raw four-dimension mean). Sample `i` of class `c` uses the
/// seed `derive_seed(seed, EVAL, c * n + i)`, so two generators evaluated with
/// the same seed see the same noise.
pub fn evaluate_policy(
    generator: &dyn Generator,
    rm: &RewardModel,
    prompts: &[usize],
    n: usize,
    seed: u64,
) -> Result<RewardStats> {
    if n == 0 || prompts.is_empty() {
        return Err(config_err("evaluation needs at least one prompt and one sample"));
    }
    let jobs: Vec<(usize, u64)> = prompts
        .iter()
        .flat_map(|&c| (0..n).map(move |i| (c, derive_seed(seed, tag::EVAL, (c * n + i) as u64))))
        .collect();
    let rewards = jobs
        .par_iter()
        .map(|&(c, s)| rm.score(&generator.generate(c, s)?, c))
        .collect::<Result<Vec<RewardVector>>>()?;
    RewardStats::from_vectors(&rewards)
}

fn check_templates(templates: &[Trajectory], set_size: usize) -> Result<()> {
    if templates.is_empty() || set_size < 2 {
        return Err(config_err("candidate sets need templates and at least 2 candidates"));
    }
    Ok(())
}

/// Candidate sets of class templates plus isotropic noise whose scale varies
/// per candidate in `[noise_min, noise_max]`. Set `k` uses class
/// `k % templates.len()`. Ground truth: the candidate closest to its template.
pub fn noisy_sets(
    templates: &[Trajectory],
    count: usize,
    set_size: usize,
    noise_min: f64,
    noise_max: f64,
    seed: u64,
) -> Result<(Vec<Vec<Trajectory>>, Vec<usize>)> {
    check_templates(templates, set_size)?;
    let mut sets = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for k in 0..count {
        let template = &templates[k % templates.len()];
        let mut rng = derived_rng(seed, tag::RM_EVAL, k as u64);
        let set = (0..set_size)
            .map(|_| {
                let sigma = rng.random_range(noise_min..=noise_max);
                let noise = normal_vec(&mut rng, template.values().len());
                let values = template.values().iter().zip(noise).map(|(v, e)| v + sigma * e).collect();
                Trajectory::new(template.frames(), template.dims(), values, template.condition, None)
            })
            .collect::<Result<Vec<_>>>()?;
        truth.push(template_oracle(&set, templates)?);
        sets.push(set);
    }
    Ok((sets, truth))
}

/// Candidate sets that differ only in smoothness: one noisy template in frame
/// order, placed at a random index, and `set_size - 1` random reorderings of
/// the very same frames. Every candidate has the same multiset of frames.
pub fn shuffled_sets(
    templates: &[Trajectory],
    count: usize,
    set_size: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Vec<Vec<Trajectory>>, Vec<usize>)> {
    check_templates(templates, set_size)?;
    let mut sets = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for k in 0..count {
        let template = &templates[k % templates.len()];
        let mut rng = derived_rng(seed, tag::RM_EVAL, (count + k) as u64);
        let noise = normal_vec(&mut rng, template.values().len());
        let values: Vec<f64> = template.values().iter().zip(noise).map(|(v, e)| v + sigma * e).collect();
        let ordered = Trajectory::new(template.frames(), template.dims(), values, template.condition, None)?;
        let frames: Vec<Vec<f64>> = ordered.frame_iter().map(<[f64]>::to_vec).collect();
        let slot = rng.random_range(0..set_size);
        let mut set = Vec::with_capacity(set_size);
        for i in 0..set_size {
            if i == slot {
                set.push(ordered.clone());
                continue;
            }
            let mut order: Vec<usize> = (0..frames.len()).collect();
            while order.iter().enumerate().all(|(a, &b)| a == b) {
                order.shuffle(&mut rng);
            }
            let shuffled: Vec<Vec<f64>> = order.iter().map(|&f| frames[f].clone()).collect();
            set.push(Trajectory::from_frames(&shuffled, template.condition, None)?);
        }
        truth.push(template_oracle(&set, templates)?);
        sets.push(set);
    }
    Ok((sets, truth))
}
