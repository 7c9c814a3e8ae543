//! Synthetic class-conditioned trajectory domain.
//!
//! Each class is a looping curve `amplitude * (sin, cos)(2 pi freq f / F + phase)`
//! with a linear drift; the class id is the "prompt".

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{read_batch_csv, write_batch_csv, Trajectory};
use crate::error::{config_err, Error, Result};
use crate::rng::{derive_seed, derived_rng, normal_vec, rng_from_seed, tag};

pub const MIN_FREQUENCY: f64 = 0.5;
pub const MAX_FREQUENCY: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    /// Cycles per trajectory.
    pub frequency: f64,
    pub amplitude: f64,
    pub phase: f64,
    /// Per-frame displacement.
    pub drift: Vec<f64>,
}

impl ClassSpec {
    /// Noiseless point at frame `f`.
    pub fn point(&self, f: usize, frames: usize, dims: usize) -> Vec<f64> {
        let angle = TAU * self.frequency * f as f64 / frames as f64 + self.phase;
        let curve = [angle.sin(), angle.cos()];
        (0..dims)
            .map(|d| {
                let base = curve.get(d).copied().unwrap_or(0.0) * self.amplitude;
                base + self.drift.get(d).copied().unwrap_or(0.0) * f as f64
            })
            .collect()
    }

    pub fn template(&self, frames: usize, dims: usize) -> Result<Trajectory> {
        let values = (0..frames).flat_map(|f| self.point(f, frames, dims)).collect();
        Trajectory::new(frames, dims, values, self.class_id, None)
    }
}

/// `classes` specs with distinct frequencies evenly covering [0.5, 2.0],
/// assigned to classes in a seed-dependent order.
pub fn make_class_specs(classes: usize, dims: usize, seed: u64) -> Result<Vec<ClassSpec>> {
    if classes < 2 {
        return Err(config_err(format!("need at least 2 classes, got {classes}")));
    }
    let mut rng = derived_rng(seed, tag::SPECS, 0);
    let mut freqs: Vec<f64> = (0..classes)
        .map(|k| MIN_FREQUENCY + (MAX_FREQUENCY - MIN_FREQUENCY) * k as f64 / (classes - 1) as f64)
        .collect();
    freqs.shuffle(&mut rng);
    Ok(freqs
        .into_iter()
        .enumerate()
        .map(|(class_id, frequency)| ClassSpec {
            class_id,
            frequency,
            amplitude: rng.random_range(0.8..1.2),
            phase: rng.random_range(0.0..TAU),
            drift: (0..dims).map(|_| rng.random_range(-0.03..0.03)).collect(),
        })
        .collect())
}

/// Template plus i.i.d. Gaussian noise of scale `sigma`.
pub fn sample_trajectory(
    spec: &ClassSpec,
    frames: usize,
    dims: usize,
    sigma: f64,
    seed: u64,
) -> Result<Trajectory> {
    let template = spec.template(frames, dims)?;
    let noise = normal_vec(&mut rng_from_seed(seed), frames * dims);
    let values = template
        .values()
        .iter()
        .zip(&noise)
        .map(|(v, z)| v + sigma * z)
        .collect();
    Trajectory::new(frames, dims, values, spec.class_id, Some(seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Trajectory>,
    pub seed: u64,
    pub sigma: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for t in &self.items {
            if let Some(c) = counts.get_mut(t.condition) {
                *c += 1;
            }
        }
        counts
    }

    pub fn export_csv<W: Write>(&self, out: W) -> Result<()> {
        write_batch_csv(&self.items, out)
    }

    pub fn import_csv<R: Read>(input: R, seed: u64, sigma: f64) -> Result<Self> {
        let items = read_batch_csv(input)?;
        if items.is_empty() {
            return Err(Error::Format("dataset file holds no trajectories".into()));
        }
        Ok(Self { items, seed, sigma })
    }
}

/// Balanced dataset, class-major order.
pub fn make_dataset(
    specs: &[ClassSpec],
    n_per_class: usize,
    frames: usize,
    dims: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || specs.is_empty() {
        return Err(config_err("dataset needs at least one item per class"));
    }
    let items = specs
        .iter()
        .flat_map(|spec| {
            (0..n_per_class).map(move |i| {
                let item_seed = derive_seed(seed, tag::DATA, (spec.class_id * n_per_class + i) as u64);
                sample_trajectory(spec, frames, dims, sigma, item_seed)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items, seed, sigma })
}

/// Alignment prompts: every class id not held out, in order.
pub fn prompt_set(classes: usize, holdout: &[usize]) -> Vec<usize> {
    (0..classes).filter(|c| !holdout.contains(c)).collect()
}

/// Index of the class template nearest (squared distance) to `y`.
pub fn nearest_template(y: &Trajectory, templates: &[Trajectory]) -> usize {
    let dist = |t: &Trajectory| -> f64 {
        y.values().iter().zip(t.values()).map(|(a, b)| (a - b).powi(2)).sum()
    };
    templates
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bd), (i, t)| {
            let d = dist(t);
            if d < bd {
                (i, d)
            } else {
                (bi, bd)
            }
        })
        .0
}
