//! Flat parameter storage, small multilayer perceptrons with a recorded tape
//! for reverse-mode gradients, and the Adam optimizer.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => elu(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y = f(x)`.
    /// ReLU uses the subgradient 0 at the origin.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => elu_derivative(x),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Weight initialization: `W ~ U(-g·√(3/fan_in), g·√(3/fan_in))` with the
/// hidden gain on every layer but the last, and zero biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub hidden_gain: f64,
    pub output_gain: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme {
            hidden_gain: core::f64::consts::SQRT_2,
            output_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
    pub init: InitScheme,
}

impl MlpSpec {
    /// Hidden layers share one activation; the output layer is linear.
    pub fn new(input: usize, hidden: &[usize], activation: Activation, output: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec { width, activation })
            .collect();
        layers.push(LayerSpec {
            width: output,
            activation: Activation::Identity,
        });
        MlpSpec {
            input,
            layers,
            init: InitScheme::default(),
        }
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(Error::param("mlp.input", "width must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::param("mlp.layers", "needs at least one layer"));
        }
        if self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::param("mlp.layers", "widths must be positive"));
        }
        Ok(())
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width)
    }

    fn shapes(&self) -> impl Iterator<Item = (usize, usize, Activation)> + '_ {
        let mut fan_in = self.input;
        self.layers.iter().map(move |l| {
            let s = (fan_in, l.width, l.activation);
            fan_in = l.width;
            s
        })
    }

    pub fn param_count(&self) -> usize {
        self.shapes().map(|(i, o, _)| i * o + o).sum()
    }

    pub fn init_params(&self, params: &mut [f64], rng: &mut SimRng) {
        assert_eq!(params.len(), self.param_count());
        let depth = self.layers.len();
        let mut offset = 0;
        for (idx, (fan_in, fan_out, _)) in self.shapes().enumerate() {
            let gain = if idx + 1 == depth {
                self.init.output_gain
            } else {
                self.init.hidden_gain
            };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            for w in &mut params[offset..offset + fan_in * fan_out] {
                *w = if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                };
            }
            offset += fan_in * fan_out;
            params[offset..offset + fan_out].fill(0.0);
            offset += fan_out;
        }
    }
}

/// Intermediates of one forward pass. Consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, Tape)> {
    if input.len() != spec.input {
        return Err(Error::dim("mlp input", spec.input, input.len()));
    }
    if params.len() != spec.param_count() {
        return Err(Error::dim("mlp params", spec.param_count(), params.len()));
    }
    let mut tape = Tape {
        inputs: Vec::with_capacity(spec.layers.len()),
        pre: Vec::with_capacity(spec.layers.len()),
        post: Vec::with_capacity(spec.layers.len()),
    };
    let mut x = input.to_vec();
    let mut offset = 0;
    for (fan_in, fan_out, act) in spec.shapes() {
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let z: Vec<f64> = (0..fan_out)
            .map(|o| {
                w[o * fan_in..(o + 1) * fan_in]
                    .iter()
                    .zip(&x)
                    .map(|(wi, xi)| wi * xi)
                    .sum::<f64>()
                    + b[o]
            })
            .collect();
        let y: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
        tape.inputs.push(x);
        tape.pre.push(z);
        x = y.clone();
        tape.post.push(y);
    }
    Ok((x, tape))
}

/// Evaluates without recording intermediates.
pub fn mlp_eval(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    mlp_forward(spec, params, input).map(|(y, _)| y)
}

/// Accumulates `∂/∂params (upstream · output)` into `grads` and returns the
/// gradient with respect to the input.
pub fn backward(spec: &MlpSpec, params: &[f64], tape: Tape, upstream: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
    if upstream.len() != spec.output() {
        return Err(Error::dim("mlp upstream", spec.output(), upstream.len()));
    }
    if grads.len() != params.len() {
        return Err(Error::dim("mlp grads", params.len(), grads.len()));
    }
    let shapes: Vec<_> = spec.shapes().collect();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(i, o, _) in &shapes {
        offsets.push(offset);
        offset += i * o + o;
    }
    let mut delta = upstream.to_vec();
    for (l, &(fan_in, fan_out, act)) in shapes.iter().enumerate().rev() {
        let x = &tape.inputs[l];
        let dz: Vec<f64> = delta
            .iter()
            .zip(&tape.pre[l])
            .zip(&tape.post[l])
            .map(|((d, &z), &y)| d * act.derivative(z, y))
            .collect();
        let base = offsets[l];
        for o in 0..fan_out {
            if dz[o] == 0.0 {
                continue;
            }
            let row = &mut grads[base + o * fan_in..base + (o + 1) * fan_in];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += dz[o] * xi;
            }
            grads[base + fan_in * fan_out + o] += dz[o];
        }
        let w = &params[base..base + fan_in * fan_out];
        let mut dx = vec![0.0; fan_in];
        for o in 0..fan_out {
            if dz[o] == 0.0 {
                continue;
            }
            for (d, wi) in dx.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                *d += dz[o] * wi;
            }
        }
        delta = dx;
    }
    Ok(delta)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ParamGroup {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// All learnable parameters of a model in one flat vector, with named
/// contiguous groups.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    layout: Vec<ParamGroup>,
    values: Vec<f64>,
    #[serde(skip)]
    grads: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero-initialized group and returns its range.
    pub fn add_group(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let start = self.values.len();
        self.layout.push(ParamGroup {
            name: name.into(),
            start,
            len,
        });
        self.values.resize(start + len, 0.0);
        self.grads.resize(start + len, 0.0);
        start..start + len
    }

    pub fn layout(&self) -> &[ParamGroup] {
        &self.layout
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.layout.iter().find(|g| g.name == name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    /// Values and gradients borrowed together.
    pub fn split_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.values, &mut self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    /// Restores the gradient buffer after deserialization and checks the
    /// layout covers the value vector without overlap.
    pub fn finish_load(&mut self) -> Result<()> {
        let mut cursor = 0;
        for g in &self.layout {
            if g.start != cursor {
                return Err(Error::param("layout", "groups must be contiguous and ordered"));
            }
            cursor += g.len;
        }
        if cursor != self.values.len() {
            return Err(Error::dim("param layout", cursor, self.values.len()));
        }
        self.grads = vec![0.0; self.values.len()];
        Ok(())
    }

    /// Parameter count of every group whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.layout
            .iter()
            .filter(|g| g.name.starts_with(prefix))
            .map(|g| g.len)
            .sum()
    }

    pub fn group_names(&self) -> Vec<String> {
        self.layout.iter().map(|g| g.name.to_string()).collect()
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
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of ranges of a [`ParamStore`]. Parameters outside
/// those ranges are never read or written by [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    ranges: Vec<Range<usize>>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, ranges: Vec<Range<usize>>) -> Self {
        let len = ranges.iter().map(|r| r.len()).sum();
        Adam {
            cfg,
            ranges,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update from the accumulated gradients, which are then zeroed.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for r in &self.ranges {
            if let Some(i) = store.grads[r.clone()].iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(alloc::format!("gradient at parameter {}", r.start + i)));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut k = 0;
        for r in &self.ranges {
            for idx in r.clone() {
                let g = store.grads[idx];
                self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                store.values[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
                store.grads[idx] = 0.0;
                k += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn spec_221() -> MlpSpec {
        MlpSpec::new(2, &[2], Activation::Tanh, 1)
    }

    #[test]
    fn zero_params_relu_gives_zero() {
        let spec = MlpSpec::new(3, &[4, 4], Activation::Relu, 2);
        let params = vec![0.0; spec.param_count()];
        let (y, _) = mlp_forward(&spec, &params, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let spec = MlpSpec::new(3, &[], Activation::Identity, 3);
        let mut params = vec![0.0; spec.param_count()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let x = [0.5, -1.5, 2.0];
        assert_eq!(mlp_eval(&spec, &params, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_forward_2_2_1() {
        // W1 = [[1, 2], [-1, 0.5]], b1 = [0.1, -0.2], W2 = [[0.3, -0.7]], b2 = [0.05]
        let spec = spec_221();
        let params = [1.0, 2.0, -1.0, 0.5, 0.1, -0.2, 0.3, -0.7, 0.05];
        let x = [0.4, -0.3];
        let h0 = (1.0 * 0.4 + 2.0 * -0.3 + 0.1_f64).tanh();
        let h1 = (-1.0 * 0.4 + 0.5 * -0.3 - 0.2_f64).tanh();
        let want = 0.3 * h0 - 0.7 * h1 + 0.05;
        let y = mlp_eval(&spec, &params, &x).unwrap();
        assert_abs_diff_eq!(y[0], want, epsilon = 1e-12);
    }

    #[test]
    fn width_mismatch_rejected() {
        let spec = spec_221();
        let params = vec![0.0; spec.param_count()];
        assert!(matches!(
            mlp_forward(&spec, &params, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let spec = MlpSpec::new(3, &[], Activation::Identity, 2);
        let params: Vec<f64> = (0..spec.param_count()).map(|i| i as f64 * 0.1).collect();
        let x = [1.0, 2.0, -1.0];
        let up = [0.5, -2.0];
        let (_, tape) = mlp_forward(&spec, &params, &x).unwrap();
        let mut grads = vec![0.0; params.len()];
        backward(&spec, &params, tape, &up, &mut grads).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads[o * 3 + i], up[o] * x[i]);
            }
            assert_eq!(grads[6 + o], up[o]);
        }
    }

    #[test]
    fn backward_accumulates() {
        let spec = MlpSpec::new(3, &[5], Activation::Elu, 2);
        let mut rng = SimRng::seed_from_u64(9);
        let mut params = vec![0.0; spec.param_count()];
        spec.init_params(&mut params, &mut rng);
        let x = [0.3, -0.2, 0.9];
        let mut once = vec![0.0; params.len()];
        let (_, tape) = mlp_forward(&spec, &params, &x).unwrap();
        backward(&spec, &params, tape, &[1.0, -1.0], &mut once).unwrap();
        let mut twice = vec![0.0; params.len()];
        for _ in 0..2 {
            let (_, tape) = mlp_forward(&spec, &params, &x).unwrap();
            backward(&spec, &params, tape, &[1.0, -1.0], &mut twice).unwrap();
        }
        for (a, b) in once.iter().zip(&twice) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Elu, Activation::Relu, Activation::Identity] {
            let spec = MlpSpec::new(4, &[6, 5], act, 3);
            let mut rng = SimRng::seed_from_u64(11);
            let mut params = vec![0.0; spec.param_count()];
            spec.init_params(&mut params, &mut rng);
            let x = [0.7, -0.4, 0.2, 1.1];
            let up = [0.3, -1.2, 0.8];
            let f = |p: &[f64]| -> f64 {
                mlp_eval(&spec, p, &x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let (_, tape) = mlp_forward(&spec, &params, &x).unwrap();
            let mut grads = vec![0.0; params.len()];
            let dx = backward(&spec, &params, tape, &up, &mut grads).unwrap();
            let h = 1e-5;
            for i in 0..params.len() {
                let mut p = params.clone();
                p[i] += h;
                let fp = f(&p);
                p[i] -= 2.0 * h;
                let fm = f(&p);
                let fd = (fp - fm) / (2.0 * h);
                let denom = grads[i].abs().max(fd.abs()).max(1e-6);
                assert!((grads[i] - fd).abs() / denom < 1e-4, "{act:?} param {i}: {} vs {fd}", grads[i]);
            }
            for i in 0..4 {
                let mut xp = x;
                xp[i] += h;
                let fp: f64 = mlp_eval(&spec, &params, &xp).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum();
                xp[i] -= 2.0 * h;
                let fm: f64 = mlp_eval(&spec, &params, &xp).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum();
                assert_abs_diff_eq!(dx[i], (fp - fm) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut store = ParamStore::new();
        let r = store.add_group("w", 3);
        store.values_mut().copy_from_slice(&[1.0, -2.0, 3.0]);
        let mut adam = Adam::new(AdamConfig::default(), vec![r]);
        adam.step(&mut store).unwrap();
        assert_eq!(store.values(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(x) = (x - 2.5)^2 has its minimizer at 2.5.
        let mut store = ParamStore::new();
        let r = store.add_group("x", 1);
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, vec![r]);
        for _ in 0..500 {
            let x = store.values()[0];
            store.grads_mut()[0] = 2.0 * (x - 2.5);
            adam.step(&mut store).unwrap();
        }
        assert_abs_diff_eq!(store.values()[0], 2.5, epsilon = 1e-3);
        assert_eq!(store.grads()[0], 0.0);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut store = ParamStore::new();
        let r = store.add_group("x", 2);
        store.grads_mut()[1] = f64::NAN;
        let mut adam = Adam::new(AdamConfig::default(), vec![r]);
        assert!(matches!(adam.step(&mut store), Err(Error::NonFinite(_))));
        assert_eq!(store.values(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_only_touches_its_ranges() {
        let mut store = ParamStore::new();
        let a = store.add_group("a", 2);
        store.add_group("b", 2);
        store.grads_mut().fill(1.0);
        let mut adam = Adam::new(AdamConfig::default(), vec![a]);
        adam.step(&mut store).unwrap();
        assert_eq!(&store.values()[2..], &[0.0, 0.0]);
        assert_eq!(&store.grads()[2..], &[1.0, 1.0]);
        assert!(store.values()[0] < 0.0);
    }

    #[test]
    fn layout_counts() {
        let mut store = ParamStore::new();
        store.add_group("actor/0", 10);
        store.add_group("actor/1", 10);
        store.add_group("critic/0", 7);
        assert_eq!(store.count_with_prefix("actor/"), 20);
        assert_eq!(store.len(), 27);
        assert_eq!(store.group("critic/0").unwrap().range(), 20..27);
    }
}
