//! Dense networks with hand-written reverse-mode gradients and an Adam optimizer.
//!
//! Weights are stored row-major (`weight[o * inputs + i]`). A forward pass that
//! will be differentiated goes through [`DenseNet::forward_cached`], which
//! records what [`DenseNet::backward`] needs; gradients accumulate into a
//! [`GradientTape`] until the optimizer consumes and zeroes it.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    Silu,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(shape_err("layer widths must be positive"));
        }
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(shape_err(format!(
                "layer {inputs}->{outputs} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            activation,
            weight,
            bias,
        })
    }

    fn pre_activation(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weight.chunks_exact(self.inputs).zip(&self.bias).map(
            |(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b,
        ));
    }
}

/// A stack of fully connected layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(shape_err(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        let net = Self { layers };
        if !net.all_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(net)
    }

    /// Uniform fan-in initialization: weights in `±1/sqrt(fan_in)`, zero biases.
    /// `widths` lists every layer boundary, input first.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(shape_err("need an input and an output width"));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = (0..w[0] * w[1])
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let act = if i + 1 == n { output } else { hidden };
                Layer::new(w[0], w[1], act, weight, vec![0.0; w[1]])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_width() {
            return Err(shape_err(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut pre = Vec::new();
        for layer in &self.layers {
            layer.pre_activation(&x, &mut pre);
            x.clear();
            x.extend(pre.iter().map(|&p| layer.activation.apply(p)));
        }
        Ok(x)
    }

    /// Forward pass that records layer inputs and pre-activations for [`Self::backward`].
    pub fn forward_cached(&self, input: &[f64], cache: &mut ForwardCache) -> Result<Vec<f64>> {
        self.check_input(input)?;
        cache.inputs.clear();
        cache.pre.clear();
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::with_capacity(layer.outputs);
            layer.pre_activation(&x, &mut pre);
            let out = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            cache.inputs.push(std::mem::replace(&mut x, out));
            cache.pre.push(pre);
        }
        Ok(x)
    }

    /// Accumulates `d(upstream . output)/d(params)` into `tape` and returns the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        tape: &mut GradientTape,
    ) -> Result<Vec<f64>> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::State(
                "backward called without a matching forward pass".into(),
            ));
        }
        if upstream.len() != self.output_width() {
            return Err(shape_err(format!(
                "upstream gradient has {} entries, network outputs {}",
                upstream.len(),
                self.output_width()
            )));
        }
        tape.check_shapes(self)?;

        let mut grad = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[l];
            let pre = &cache.pre[l];
            if pre.len() != layer.outputs || input.len() != layer.inputs {
                return Err(Error::State(format!(
                    "cached activations at layer {l} do not match the network"
                )));
            }
            let dpre: Vec<f64> = grad
                .iter()
                .zip(pre)
                .map(|(g, &p)| g * layer.activation.derivative(p))
                .collect();
            let gw = &mut tape.weight[l];
            for (o, &d) in dpre.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            for (b, d) in tape.bias[l].iter_mut().zip(&dpre) {
                *b += d;
            }
            let mut next = vec![0.0; layer.inputs];
            for (row, &d) in layer.weight.chunks_exact(layer.inputs).zip(&dpre) {
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            grad = next;
        }
        tape.count += 1;
        Ok(grad)
    }

    pub fn new_tape(&self) -> GradientTape {
        GradientTape::for_net(self)
    }

    /// Visits every parameter in a fixed order: per layer, weights then biases.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }

    /// Checkpoint text: a JSON object
    /// `{"format":"vpo-densenet","version":1,"layers":[{"inputs","outputs","activation","weight","bias"}]}`
    /// with row-major weights. Floats round-trip exactly.
    pub fn to_checkpoint_string(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layers: self.layers.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unknown checkpoint format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let layers = ckpt
            .layers
            .into_iter()
            .map(|l| Layer::new(l.inputs, l.outputs, l.activation, l.weight, l.bias))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}

const CHECKPOINT_FORMAT: &str = "vpo-densenet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layers: Vec<Layer>,
}

/// Activations recorded by [`DenseNet::forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// Gradient buffers shaped like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    /// Number of backward passes accumulated since the last reset.
    pub count: usize,
}

impl GradientTape {
    pub fn for_net(net: &DenseNet) -> Self {
        Self {
            weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            count: 0,
        }
    }

    fn check_shapes(&self, net: &DenseNet) -> Result<()> {
        let ok = self.weight.len() == net.layers.len()
            && self.bias.len() == net.layers.len()
            && net
                .layers
                .iter()
                .zip(self.weight.iter().zip(&self.bias))
                .all(|(l, (w, b))| w.len() == l.weight.len() && b.len() == l.bias.len());
        if ok {
            Ok(())
        } else {
            Err(shape_err("gradient tape does not match network shapes"))
        }
    }

    pub fn zero(&mut self) {
        for buf in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            buf.fill(0.0);
        }
        self.count = 0;
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    /// Same ordering as [`DenseNet::params`].
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight
            .iter_mut()
            .zip(self.bias.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Plain Adam (no weight decay).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        let n = net.param_count();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }

    /// Applies one Adam update from `tape` and zeroes it.
    pub fn step(&mut self, net: &mut DenseNet, tape: &mut GradientTape) -> Result<()> {
        if tape.count == 0 {
            return Err(Error::State("optimizer step on an empty gradient tape".into()));
        }
        tape.check_shapes(net)?;
        if self.m.len() != net.param_count() {
            return Err(shape_err("optimizer state does not match network"));
        }
        if let Some((idx, g)) = tape.values().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {g} at flat parameter index {idx} (optimizer step {})",
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in net
            .params_mut()
            .zip(tape.values())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tape.zero();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_oneof, proptest, Just, ProptestConfig};

    fn linear(w: Vec<f64>, b: Vec<f64>, inputs: usize) -> DenseNet {
        let outputs = b.len();
        DenseNet::new(vec![
            Layer::new(inputs, outputs, Activation::Linear, w, b).unwrap()
        ])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn diagonal_layer_with_bias() {
        let net = linear(vec![2.0, 0.0, 0.0, 3.0], vec![1.0, 1.0], 2);
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut rng = rng_from_seed(3);
        let net = DenseNet::init(&[4, 5], Activation::Tanh, Activation::Tanh, &mut rng).unwrap();
        assert!(net.forward(&[0.0; 4]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let net = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let a = Layer::new(2, 3, Activation::Silu, vec![0.0; 6], vec![0.0; 3]).unwrap();
        let b = Layer::new(4, 1, Activation::Linear, vec![0.0; 4], vec![0.0]).unwrap();
        assert!(matches!(DenseNet::new(vec![a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let net = linear(vec![0.5, -1.0, 2.0, 0.25], vec![0.0, 0.0], 2);
        let x = [3.0, -2.0];
        let g = [0.7, -1.1];
        let mut cache = ForwardCache::default();
        net.forward_cached(&x, &mut cache).unwrap();
        let mut tape = net.new_tape();
        let dx = net.backward(&cache, &g, &mut tape).unwrap();
        assert_eq!(tape.weight[0], vec![0.7 * 3.0, 0.7 * -2.0, -1.1 * 3.0, -1.1 * -2.0]);
        assert_eq!(tape.bias[0], vec![0.7, -1.1]);
        assert_eq!(dx, vec![0.7 * 0.5 + -1.1 * 2.0, 0.7 * -1.0 + -1.1 * 0.25]);
    }

    #[test]
    fn zero_upstream_gives_zero_tape() {
        let mut rng = rng_from_seed(9);
        let net = DenseNet::init(&[3, 6, 2], Activation::Silu, Activation::Linear, &mut rng).unwrap();
        let mut cache = ForwardCache::default();
        net.forward_cached(&[0.3, -0.2, 1.0], &mut cache).unwrap();
        let mut tape = net.new_tape();
        net.backward(&cache, &[0.0, 0.0], &mut tape).unwrap();
        assert!(tape.is_zero());
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let net = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        let mut tape = net.new_tape();
        let cache = ForwardCache::default();
        assert!(matches!(
            net.backward(&cache, &[1.0, 1.0], &mut tape),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let net = linear(vec![1.0, 2.0], vec![0.0], 2);
        let mut cache = ForwardCache::default();
        net.forward_cached(&[1.0, 1.0], &mut cache).unwrap();
        let mut tape = net.new_tape();
        net.backward(&cache, &[1.0], &mut tape).unwrap();
        net.backward(&cache, &[1.0], &mut tape).unwrap();
        assert_eq!(tape.weight[0], vec![2.0, 2.0]);
        assert_eq!(tape.count, 2);
    }

    /// Central finite differences of `upstream . forward(x)` over every parameter.
    fn fd_gradient(net: &DenseNet, x: &[f64], upstream: &[f64], h: f64) -> Vec<f64> {
        let n = net.param_count();
        let objective = |net: &DenseNet| -> f64 {
            net.forward(x)
                .unwrap()
                .iter()
                .zip(upstream)
                .map(|(a, b)| a * b)
                .sum()
        };
        (0..n)
            .map(|i| {
                let mut plus = net.clone();
                *plus.params_mut().nth(i).unwrap() += h;
                let mut minus = net.clone();
                *minus.params_mut().nth(i).unwrap() -= h;
                (objective(&plus) - objective(&minus)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn analytic_gradients_match_finite_differences(
            seed in any::<u64>(),
            depth in 1usize..=3,
            widths in proptest::collection::vec(1usize..=16, 4),
            act in prop_oneof![Just(Activation::Silu), Just(Activation::Tanh), Just(Activation::Linear)],
        ) {
            let mut rng = rng_from_seed(seed);
            let dims = &widths[..=depth];
            let net = DenseNet::init(dims, act, Activation::Linear, &mut rng).unwrap();
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.5..1.5)).collect();
            let up: Vec<f64> = (0..dims[depth]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut cache = ForwardCache::default();
            net.forward_cached(&x, &mut cache).unwrap();
            let mut tape = net.new_tape();
            net.backward(&cache, &up, &mut tape).unwrap();
            let fd = fd_gradient(&net, &x, &up, 1e-5);
            for (a, n) in tape.values().zip(&fd) {
                let err = (a - n).abs();
                prop_assert!(err <= 1e-7 || err <= 1e-4 * a.abs().max(n.abs()),
                    "analytic {a} vs numeric {n}");
            }
        }

        #[test]
        fn checkpoint_text_round_trips_exactly(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let net = DenseNet::init(&[5, 7, 3], Activation::Silu, Activation::Linear, &mut rng).unwrap();
            let text = net.to_checkpoint_string().unwrap();
            prop_assert_eq!(DenseNet::from_checkpoint_str(&text).unwrap(), net);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let mut rng = rng_from_seed(21);
        let net = DenseNet::init(&[6, 8, 4], Activation::Silu, Activation::Linear, &mut rng).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let run = || {
            let mut cache = ForwardCache::default();
            let y = net.forward_cached(&x, &mut cache).unwrap();
            let mut tape = net.new_tape();
            net.backward(&cache, &[1.0, -1.0, 0.5, 0.25], &mut tape).unwrap();
            (y, tape)
        };
        let (y1, t1) = run();
        let (y2, t2) = run();
        assert_eq!(y1, y2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let net = linear(vec![1.0], vec![0.0], 1);
        let text = net.to_checkpoint_string().unwrap().replace("\"version\":1", "\"version\":7");
        assert!(matches!(DenseNet::from_checkpoint_str(&text), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let mut rng = rng_from_seed(1);
        let net = DenseNet::init(&[3, 4, 2], Activation::Silu, Activation::Linear, &mut rng).unwrap();
        net.save(&path).unwrap();
        assert_eq!(DenseNet::load(&path).unwrap(), net);
    }

    fn tape_with(net: &DenseNet, grad: f64) -> GradientTape {
        let mut tape = net.new_tape();
        tape.values_mut().for_each(|g| *g = grad);
        tape.count = 1;
        tape
    }

    #[test]
    fn first_adam_step_moves_each_coordinate_by_lr() {
        let mut net = linear(vec![1.0, -2.0], vec![0.5], 2);
        let before: Vec<f64> = net.params().copied().collect();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut tape = net.new_tape();
        tape.weight[0] = vec![0.3, -4.0];
        tape.bias[0] = vec![1e-3];
        tape.count = 1;
        adam.step(&mut net, &mut tape).unwrap();
        // At t=1, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        for ((a, b), g) in net.params().zip(&before).zip([0.3, -4.0, 1e-3]) {
            let expected = 1e-3 * g / (f64::abs(g) + 1e-8);
            assert!((b - a - expected).abs() < 1e-15);
            assert!(((b - a).abs() - 1e-3).abs() < 1e-3 * 1e-5);
        }
        assert_eq!(adam.step_count(), 1);
        assert!(tape.is_zero());
        assert_eq!(tape.count, 0);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut net = linear(vec![1.0, -2.0], vec![0.5], 2);
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut tape = tape_with(&net, 0.0);
        adam.step(&mut net, &mut tape).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn repeated_gradient_does_not_grow_step() {
        let mut net = linear(vec![1.0], vec![0.0], 1);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let p0 = net.layers()[0].weight[0];
        let mut tape = tape_with(&net, 0.7);
        adam.step(&mut net, &mut tape).unwrap();
        let p1 = net.layers()[0].weight[0];
        let mut tape = tape_with(&net, 0.7);
        adam.step(&mut net, &mut tape).unwrap();
        let p2 = net.layers()[0].weight[0];
        assert!((p2 - p1).abs() <= (p1 - p0).abs() + 1e-12);
        assert!(adam.second_moments().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = linear(vec![1.0], vec![0.0], 1);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut tape = tape_with(&net, f64::NAN);
        assert!(matches!(adam.step(&mut net, &mut tape), Err(Error::Numeric(_))));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn empty_tape_is_rejected() {
        let mut net = linear(vec![1.0], vec![0.0], 1);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut tape = net.new_tape();
        assert!(matches!(adam.step(&mut net, &mut tape), Err(Error::State(_))));
    }

    #[test]
    fn clone_is_independent_and_identical() {
        let mut rng = rng_from_seed(5);
        let mut net = DenseNet::init(&[3, 4, 2], Activation::Silu, Activation::Linear, &mut rng).unwrap();
        let snapshot = net.clone();
        let x = [0.2, -0.7, 1.3];
        assert_eq!(snapshot, net);
        assert_eq!(snapshot.forward(&x).unwrap(), net.forward(&x).unwrap());
        net.params_mut().for_each(|p| *p += 1.0);
        assert_ne!(snapshot, net);
        assert!(snapshot.params().zip(net.params()).all(|(a, b)| *b == *a + 1.0));
    }
}
