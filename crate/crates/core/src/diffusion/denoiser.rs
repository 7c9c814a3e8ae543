use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{Activation, DenseNet, ForwardCache, GradientTape};

/// Shape of a denoiser: trajectory size, embeddings and hidden widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserLayout {
    pub frames: usize,
    pub dims: usize,
    pub classes: usize,
    /// Sinusoidal timestep embedding width (even).
    pub time_embed_width: usize,
    pub hidden: Vec<usize>,
}

impl Default for DenoiserLayout {
    fn default() -> Self {
        Self {
            frames: 16,
            dims: 2,
            classes: 4,
            time_embed_width: 16,
            hidden: vec![128, 128],
        }
    }
}

impl DenoiserLayout {
    pub fn sample_width(&self) -> usize {
        self.frames * self.dims
    }

    pub fn input_width(&self) -> usize {
        self.sample_width() + self.time_embed_width + self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < super::MIN_FRAMES || self.dims == 0 || self.classes == 0 {
            return Err(config_err(format!("invalid denoiser layout {self:?}")));
        }
        if self.time_embed_width == 0 || self.time_embed_width % 2 != 0 {
            return Err(config_err("timestep embedding width must be even and positive"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `sin(t * w_i)` then `cos(t * w_i)` with
/// `w_i = 10000^(-i / half)`.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let freqs = (0..half).map(|i| (-(i as f64) / half as f64 * 10000f64.ln()).exp());
    let (mut sin, cos): (Vec<f64>, Vec<f64>) = freqs
        .map(|w| {
            let a = t as f64 * w;
            (a.sin(), a.cos())
        })
        .unzip();
    sin.extend(cos);
    sin
}

/// Noise-prediction network `eps(x_t, t, c)` over flattened trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    layout: DenoiserLayout,
    net: DenseNet,
}

impl Denoiser {
    pub fn new(layout: DenoiserLayout, net: DenseNet) -> Result<Self> {
        layout.validate()?;
        if net.input_width() != layout.input_width() || net.output_width() != layout.sample_width() {
            return Err(shape_err(format!(
                "denoiser net is {}->{}, layout needs {}->{}",
                net.input_width(),
                net.output_width(),
                layout.input_width(),
                layout.sample_width()
            )));
        }
        Ok(Self { layout, net })
    }

    /// SiLU hidden layers, linear output, uniform fan-in init.
    pub fn init<R: Rng + ?Sized>(layout: DenoiserLayout, rng: &mut R) -> Result<Self> {
        layout.validate()?;
        let mut widths = vec![layout.input_width()];
        widths.extend(&layout.hidden);
        widths.push(layout.sample_width());
        let net = DenseNet::init(&widths, Activation::Silu, Activation::Linear, rng)?;
        Self::new(layout, net)
    }

    pub fn layout(&self) -> &DenoiserLayout {
        &self.layout
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    fn input(&self, x_t: &[f64], t: usize, condition: usize) -> Result<Vec<f64>> {
        if x_t.len() != self.layout.sample_width() {
            return Err(shape_err(format!(
                "denoiser expects {} values, got {}",
                self.layout.sample_width(),
                x_t.len()
            )));
        }
        if condition >= self.layout.classes {
            return Err(shape_err(format!(
                "condition {condition} outside {} classes",
                self.layout.classes
            )));
        }
        let mut input = Vec::with_capacity(self.layout.input_width());
        input.extend_from_slice(x_t);
        input.extend(timestep_embedding(t, self.layout.time_embed_width));
        input.extend((0..self.layout.classes).map(|k| if k == condition { 1.0 } else { 0.0 }));
        Ok(input)
    }

    pub fn predict_noise(&self, x_t: &[f64], t: usize, condition: usize) -> Result<Vec<f64>> {
        self.net.forward(&self.input(x_t, t, condition)?)
    }

    pub fn predict_noise_cached(
        &self,
        x_t: &[f64],
        t: usize,
        condition: usize,
        cache: &mut ForwardCache,
    ) -> Result<Vec<f64>> {
        self.net.forward_cached(&self.input(x_t, t, condition)?, cache)
    }

    /// Accumulates parameter gradients for `upstream . eps` into `tape`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        tape: &mut GradientTape,
    ) -> Result<()> {
        self.net.backward(cache, upstream, tape).map(|_| ())
    }
}
