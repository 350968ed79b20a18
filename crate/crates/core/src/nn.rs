//! Dense feedforward networks with exact reverse-accumulation gradients.
//!
//! Only what the velocity field and the value function need: fully
//! connected layers, an elementwise hidden activation, a linear output
//! layer, gradients with respect to both parameters and inputs, and Adam.
//!
//! Forward and backward are pure functions of `&NetworkParams`, so they can
//! be shared freely across threads. [`Adam`] is the single writer.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{CounterRng, Stream};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                // log(1 + e^z) without overflow
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, activation: Activation, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network input and output dims must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("network needs at least one hidden layer".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Stable FNV-1a digest of the `NetworkSpec`, stored alongside parameters.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::default();
        h.write_u64(self.input_dim as u64);
        for &d in &self.hidden_dims {
            h.write_u64(d as u64);
        }
        h.write_u64(self.output_dim as u64);
        h.write_u64(self.activation as u64);
        h.write_u64(self.seed);
        h.finish()
    }
}

/// FNV-1a, used for descriptor hashes that must be stable across builds.
#[derive(Debug, Clone)]
pub(crate) struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub(crate) fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn write_f64(&mut self, v: f64) {
        self.write_u64(v.to_bits());
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// One affine map `y = W x + b`, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], bias: Vec<f64>) -> Result<Self> {
        let out_dim = rows.len();
        let in_dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != in_dim) {
            return Err(Error::Config("ragged weight matrix".into()));
        }
        if bias.len() != out_dim {
            return Err(Error::Dimension {
                what: "bias",
                expected: out_dim,
                got: bias.len(),
            });
        }
        Ok(Self {
            out_dim,
            in_dim,
            weights: rows.concat(),
            bias,
        })
    }

    #[inline]
    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias)) {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Parameters of a network, together with the `NetworkSpec` that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

/// Gradient with the same shapes as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params.layers.iter().map(|l| Layer::zeros(l.out_dim, l.in_dim)).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.flat().all(|v| v == 0.0)
    }

    /// All entries in a fixed order (layer by layer, weights then bias).
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }
}

/// Reusable activation buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Tape {
    pub fn new(params: &NetworkParams) -> Self {
        let widths = params.spec.widths();
        let max = *widths.iter().max().unwrap_or(&1);
        Self {
            pre: params.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            post: params.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            delta: vec![0.0; max],
            delta_next: vec![0.0; max],
        }
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl NetworkParams {
    /// Stable digest of every weight and bias, bit for bit.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::default();
        for layer in self.layers() {
            h.write_u64(layer.out_dim as u64);
            h.write_u64(layer.in_dim as u64);
            layer.weights.iter().chain(&layer.bias).for_each(|v| h.write_f64(*v));
        }
        h.finish()
    }

    /// Fresh parameters: weights `N(0, 1) / sqrt(fan_in)`, biases zero.
    pub fn init(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let rng = CounterRng::new(spec.seed);
        let layers = spec
            .widths()
            .windows(2)
            .enumerate()
            .map(|(li, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let mut r = rng.at(Stream::NetInit, li as u64);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z * scale
                    })
                    .collect();
                Layer {
                    out_dim: fan_out,
                    in_dim: fan_in,
                    weights,
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Assemble parameters from explicit layers. The hidden activation is
    /// taken from `spec`; the last layer is always linear.
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer>) -> Result<Self> {
        let widths = {
            let mut w = vec![spec.input_dim];
            w.extend(spec.hidden_dims.iter().copied());
            w.push(spec.output_dim);
            w
        };
        if layers.len() + 1 != widths.len() {
            return Err(Error::Config(format!("expected {} layers, got {}", widths.len() - 1, layers.len())));
        }
        for (l, w) in layers.iter().zip(widths.windows(2)) {
            if l.in_dim != w[0] || l.out_dim != w[1] || l.weights.len() != w[0] * w[1] || l.bias.len() != w[1] {
                return Err(Error::Config("layer shapes do not match spec".into()));
            }
            if !l.is_finite() {
                return Err(Error::Numeric("non-finite parameter".into()));
            }
        }
        Ok(Self { spec, layers })
    }

    /// A single affine layer with no hidden activation (used for probes).
    pub fn linear(layer: Layer) -> Self {
        let spec = NetworkSpec {
            input_dim: layer.in_dim,
            hidden_dims: Vec::new(),
            output_dim: layer.out_dim,
            activation: Activation::Tanh,
            seed: 0,
        };
        Self { spec, layers: vec![layer] }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec.hash()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.spec.input_dim,
                got: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut tape = Tape::new(self);
        self.forward_tape(input, &mut tape);
        Ok(tape.output().to_vec())
    }

    /// Unchecked forward pass into `tape`; callers validate shapes.
    pub fn forward_tape(&self, input: &[f64], tape: &mut Tape) {
        let last = self.layers.len() - 1;
        let act = self.spec.activation;
        for (li, layer) in self.layers.iter().enumerate() {
            let (before, rest) = tape.post.split_at_mut(li);
            let x: &[f64] = if li == 0 { input } else { &before[li - 1] };
            let pre = &mut tape.pre[li];
            layer.affine(x, pre);
            let post = &mut rest[0];
            if li == last {
                post.copy_from_slice(pre);
            } else {
                for (a, &z) in post.iter_mut().zip(pre.iter()) {
                    *a = act.apply(z);
                }
            }
        }
    }

    /// Gradients of `<upstream, f(input)>` with respect to the parameters and
    /// the input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
        self.check_input(input)?;
        if upstream.len() != self.spec.output_dim {
            return Err(Error::Dimension {
                what: "upstream gradient",
                expected: self.spec.output_dim,
                got: upstream.len(),
            });
        }
        let mut tape = Tape::new(self);
        self.forward_tape(input, &mut tape);
        let mut grads = ParamGrads::zeros_like(self);
        let mut input_grad = vec![0.0; self.spec.input_dim];
        self.backward_tape(input, &mut tape, upstream, Some(&mut grads), Some(&mut input_grad));
        Ok((grads, input_grad))
    }

    /// Output and input gradient of `<upstream, f(input)>`, skipping
    /// parameter gradients.
    pub fn forward_input_grad(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(input)?;
        if upstream.len() != self.spec.output_dim {
            return Err(Error::Dimension {
                what: "upstream gradient",
                expected: self.spec.output_dim,
                got: upstream.len(),
            });
        }
        let mut tape = Tape::new(self);
        self.forward_tape(input, &mut tape);
        let output = tape.output().to_vec();
        let mut input_grad = vec![0.0; self.spec.input_dim];
        self.backward_tape(input, &mut tape, upstream, None, Some(&mut input_grad));
        Ok((output, input_grad))
    }

    /// Reverse pass over a tape filled by [`forward_tape`](Self::forward_tape).
    /// Parameter gradients are accumulated (added) into `grads`.
    pub fn backward_tape(&self, input: &[f64], tape: &mut Tape, upstream: &[f64], mut grads: Option<&mut ParamGrads>, input_grad: Option<&mut [f64]>) {
        let last = self.layers.len() - 1;
        let act = self.spec.activation;
        let Tape { pre, post, delta, delta_next } = tape;
        delta[..upstream.len()].copy_from_slice(upstream);
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let d = &mut delta[..layer.out_dim];
            if li != last {
                for ((dv, &z), &a) in d.iter_mut().zip(&pre[li]).zip(&post[li]) {
                    *dv *= act.derivative(z, a);
                }
            }
            let x: &[f64] = if li == 0 { input } else { &post[li - 1] };
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[li];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gl.bias[o] += dv;
                    let row = &mut gl.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, &xv) in row.iter_mut().zip(x) {
                        *w += dv * xv;
                    }
                }
            }
            if li == 0 && input_grad.is_none() {
                break;
            }
            let dn = &mut delta_next[..layer.in_dim];
            dn.iter_mut().for_each(|v| *v = 0.0);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (acc, &w) in dn.iter_mut().zip(row) {
                    *acc += dv * w;
                }
            }
            delta[..layer.in_dim].copy_from_slice(dn);
        }
        if let Some(ig) = input_grad {
            ig.copy_from_slice(&delta[..self.spec.input_dim]);
        }
    }

    pub fn to_checkpoint(&self, kind: &str, meta: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.to_string(),
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint format_version {}", ck.format_version)));
        }
        ck.spec.validate()?;
        let layers = ck
            .spec
            .widths()
            .windows(2)
            .zip(&ck.layers)
            .map(|(w, rec)| Layer {
                out_dim: w[1],
                in_dim: w[0],
                weights: rec.weights.clone(),
                bias: rec.bias.clone(),
            })
            .collect();
        NetworkParams::from_layers(ck.spec.clone(), layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// On-disk network document. `meta` carries owner-specific fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(default)]
    pub kind: String,
    pub spec: NetworkSpec,
    pub layers: Vec<LayerRecord>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: ParamGrads,
    second_moment: ParamGrads,
    step_count: u64,
}

impl Adam {
    pub fn new(params: &NetworkParams, config: AdamConfig) -> Result<Self> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(config.beta1) || !ok(config.beta2) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !(config.learning_rate > 0.0) || !(config.epsilon > 0.0) {
            return Err(Error::Config("Adam learning rate and epsilon must be positive".into()));
        }
        Ok(Self {
            config,
            first_moment: ParamGrads::zeros_like(params),
            second_moment: ParamGrads::zeros_like(params),
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. Non-finite gradients leave both params and state untouched.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::Dimension {
                what: "gradient layers",
                expected: params.layers.len(),
                got: grads.layers.len(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step_count as i32);
        let c2 = 1.0 - b2.powi(self.step_count as i32);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        };
        for (li, layer) in params.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.first_moment.layers[li];
            let v = &mut self.second_moment.layers[li];
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(seed: u64, act: Activation) -> NetworkSpec {
        NetworkSpec::new(3, vec![5, 4], 2, act, seed)
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = NetworkSpec::new(2, vec![8], 2, Activation::Tanh, 7);
        let a = NetworkParams::init(spec.clone()).unwrap();
        let b = NetworkParams::init(spec).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn default_velocity_shape_param_count() {
        let spec = NetworkSpec::new(2, vec![64, 64], 2, Activation::Tanh, 0);
        assert_eq!(spec.param_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
        assert_eq!(spec.param_count(), 4482);
        assert_eq!(NetworkParams::init(spec).unwrap().param_count(), 4482);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(NetworkParams::init(NetworkSpec::new(0, vec![4], 1, Activation::Tanh, 0)).is_err());
        assert!(NetworkParams::init(NetworkSpec::new(2, vec![], 1, Activation::Tanh, 0)).is_err());
        assert!(NetworkParams::init(NetworkSpec::new(2, vec![3, 0], 1, Activation::Tanh, 0)).is_err());
    }

    #[test]
    fn zero_weights_output_bias() {
        let spec = NetworkSpec::new(2, vec![3], 2, Activation::Tanh, 0);
        let mut p = NetworkParams::init(spec).unwrap();
        for l in p.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        p.layers_mut()[1].bias = vec![0.25, -1.5];
        assert_eq!(p.forward(&[3.0, -4.0]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn linear_layer_map_and_transpose_gradient() {
        let layer = Layer::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]], vec![0.0, 0.0]).unwrap();
        let p = NetworkParams::linear(layer);
        assert_eq!(p.forward(&[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        let (_, ig) = p.backward(&[1.0, 1.0], &[0.5, -1.0]).unwrap();
        // W^T u
        assert_eq!(ig, vec![1.0, -3.0]);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let p = NetworkParams::init(small_spec(1, Activation::Tanh)).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Dimension { .. })));
        assert!(matches!(p.forward(&[1.0, f64::NAN, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(p.backward(&[1.0, 2.0, 3.0], &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let p = NetworkParams::init(small_spec(3, Activation::Softplus)).unwrap();
        let (g, ig) = p.backward(&[0.3, -0.2, 0.9], &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(ig.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_backward_are_pure() {
        let p = NetworkParams::init(small_spec(5, Activation::Tanh)).unwrap();
        let x = [0.1, 0.7, -1.3];
        assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
        assert_eq!(p.backward(&x, &[1.0, 2.0]).unwrap(), p.backward(&x, &[1.0, 2.0]).unwrap());
    }

    #[test]
    fn lipschitz_probe() {
        let p = NetworkParams::init(small_spec(9, Activation::Tanh)).unwrap();
        let x = [0.4, -0.3, 0.5];
        let h = 1e-7;
        let mut xh = x;
        xh[0] += h;
        let (y, yh) = (p.forward(&x).unwrap(), p.forward(&xh).unwrap());
        // local Lipschitz constant from a wider finite difference
        let mut xw = x;
        xw[0] += 1e-3;
        let yw = p.forward(&xw).unwrap();
        let l = y.iter().zip(&yw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / 1e-3;
        let diff = y.iter().zip(&yh).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 2.0 * l * h + 1e-15, "diff {diff} vs L·h {}", l * h);
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut p = NetworkParams::init(small_spec(2, Activation::Tanh)).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig::default()).unwrap();
        opt.step(&mut p, &ParamGrads::zeros_like(&before)).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = NetworkParams::init(small_spec(2, Activation::Tanh)).unwrap();
        let before = p.clone();
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].weights[0] = 0.37;
        g.layers[1].bias[2] = -4.0;
        let mut opt = Adam::new(&p, AdamConfig::default()).unwrap();
        opt.step(&mut p, &g).unwrap();
        let d0 = p.layers()[0].weights[0] - before.layers()[0].weights[0];
        let d1 = p.layers()[1].bias[2] - before.layers()[1].bias[2];
        // m̂ / sqrt(v̂) = sign(g) on the first step
        assert!((d0 + 1e-3).abs() < 1e-10, "{d0}");
        assert!((d1 - 1e-3).abs() < 1e-10, "{d1}");
    }

    #[test]
    fn adam_constant_grad_descends() {
        let mut p = NetworkParams::init(small_spec(2, Activation::Tanh)).unwrap();
        let w0 = p.layers()[0].weights[3];
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].weights[3] = 2.5;
        let mut opt = Adam::new(&p, AdamConfig::default()).unwrap();
        for _ in 0..50 {
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.layers()[0].weights[3] < w0 - 0.04);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = NetworkParams::init(small_spec(2, Activation::Tanh)).unwrap();
        let before = p.clone();
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].weights[0] = f64::INFINITY;
        let mut opt = Adam::new(&p, AdamConfig::default()).unwrap();
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 0);
        assert!(Adam::new(
            &p,
            AdamConfig {
                beta1: 1.0,
                ..AdamConfig::default()
            }
        )
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = NetworkParams::init(NetworkSpec::new(3, vec![7, 6], 1, Activation::Softplus, 11)).unwrap();
        let text = p.to_checkpoint("probe", BTreeMap::new()).to_json().unwrap();
        let back = NetworkParams::from_checkpoint(&Checkpoint::from_json(&text).unwrap()).unwrap();
        assert_eq!(p, back);
        let text2 = back.to_checkpoint("probe", BTreeMap::new()).to_json().unwrap();
        assert_eq!(text, text2);
    }

    /// Relative error with an absolute floor for near-zero components.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn gradients_match_central_differences(
            seed in 0u64..10_000,
            x in proptest::array::uniform3(-2.0f64..2.0),
            u in proptest::array::uniform2(-1.0f64..1.0),
            act in prop_oneof![Just(Activation::Tanh), Just(Activation::Softplus)],
        ) {
            let p = NetworkParams::init(small_spec(seed, act)).unwrap();
            let (pg, ig) = p.backward(&x, &u).unwrap();
            let f = |p: &NetworkParams, x: &[f64]| -> f64 {
                p.forward(x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum()
            };
            let h = 1e-4;
            for i in 0..3 {
                let (mut xp, mut xm) = (x, x);
                xp[i] += h;
                xm[i] -= h;
                let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
                prop_assert!(rel_err(ig[i], fd) < 1e-5, "input {i}: {} vs {fd}", ig[i]);
            }
            for li in 0..p.layers().len() {
                for k in 0..p.layers()[li].weights.len() {
                    let (mut pp, mut pm) = (p.clone(), p.clone());
                    pp.layers_mut()[li].weights[k] += h;
                    pm.layers_mut()[li].weights[k] -= h;
                    let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
                    prop_assert!(rel_err(pg.layers[li].weights[k], fd) < 1e-5);
                }
                for k in 0..p.layers()[li].bias.len() {
                    let (mut pp, mut pm) = (p.clone(), p.clone());
                    pp.layers_mut()[li].bias[k] += h;
                    pm.layers_mut()[li].bias[k] -= h;
                    let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
                    prop_assert!(rel_err(pg.layers[li].bias[k], fd) < 1e-5);
                }
            }
        }
    }
}
