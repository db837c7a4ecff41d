//! State-conditioned monotone mixer.
//!
//! Four hypernetworks read the global state and emit `W₁ (C×N)`, `b₁ (C)`,
//! `w₂ (C)` and `b₂`. The weight heads pass through `|·|`, so the total value
//! `V_tot = w₂ᵀ ELU(W₁ v + b₁) + b₂` is non-decreasing in every agent value.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::nn::{self, elu, elu_derivative, Activation, InitScheme, MlpSpec, Tape};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerShape {
    pub state_dim: usize,
    pub agents: usize,
    /// Mixing width `C`.
    pub width: usize,
    pub hyper_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    shape: MixerShape,
    w1: MlpSpec,
    b1: MlpSpec,
    w2: MlpSpec,
    b2: MlpSpec,
    elu_sign: f64,
}

/// Generated mixing weights for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// `V_tot` for given weights.
pub fn mix(weights: &MixWeights, v_agg: &[f64]) -> f64 {
    let pre = weights.w1.matvec(v_agg);
    let hidden: Vec<f64> = pre.iter().zip(&weights.b1).map(|(p, b)| elu(p + b)).collect();
    dot(&weights.w2, &hidden) + weights.b2
}

/// Recorded forward pass through the mixer.
#[derive(Debug)]
pub struct MixForward {
    pub v_tot: f64,
    weights: MixWeights,
    raw_w1: Vec<f64>,
    raw_w2: Vec<f64>,
    v_agg: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    tapes: [Tape; 4],
}

impl MixForward {
    pub fn weights(&self) -> &MixWeights {
        &self.weights
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Mixer {
    pub fn new(shape: MixerShape) -> Result<Self> {
        let MixerShape {
            state_dim,
            agents,
            width,
            hyper_hidden,
        } = shape;
        if state_dim == 0 || agents == 0 || width == 0 || hyper_hidden == 0 {
            return Err(Error::param("mixer", "all widths must be positive"));
        }
        let head_init = InitScheme {
            hidden_gain: core::f64::consts::SQRT_2,
            output_gain: 0.1,
        };
        Ok(Mixer {
            shape,
            w1: MlpSpec::new(state_dim, &[hyper_hidden], Activation::Relu, width * agents).with_init(head_init),
            b1: MlpSpec::new(state_dim, &[], Activation::Identity, width).with_init(head_init),
            w2: MlpSpec::new(state_dim, &[hyper_hidden], Activation::Relu, width).with_init(head_init),
            b2: MlpSpec::new(state_dim, &[hyper_hidden], Activation::Relu, 1).with_init(head_init),
            elu_sign: 1.0,
        })
    }

    /// Mutation canary for the verification suite: negates the hidden ELU.
    #[doc(hidden)]
    pub fn with_flipped_elu(mut self) -> Self {
        self.elu_sign = -self.elu_sign;
        self
    }

    pub fn shape(&self) -> MixerShape {
        self.shape
    }

    fn specs(&self) -> [&MlpSpec; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn offsets(&self) -> [usize; 5] {
        let mut o = [0; 5];
        for (i, s) in self.specs().iter().enumerate() {
            o[i + 1] = o[i] + s.param_count();
        }
        o
    }

    pub fn param_count(&self) -> usize {
        self.offsets()[4]
    }

    pub fn init_params(&self, params: &mut [f64], rng: &mut SimRng) {
        assert_eq!(params.len(), self.param_count());
        let o = self.offsets();
        for (i, spec) in self.specs().iter().enumerate() {
            spec.init_params(&mut params[o[i]..o[i + 1]], rng);
        }
    }

    fn check(&self, params: &[f64], s: &[f64]) -> Result<()> {
        if s.len() != self.shape.state_dim {
            return Err(Error::dim("mixer state", self.shape.state_dim, s.len()));
        }
        if params.len() != self.param_count() {
            return Err(Error::dim("mixer params", self.param_count(), params.len()));
        }
        Ok(())
    }

    pub fn generate_weights(&self, params: &[f64], s: &[f64]) -> Result<MixWeights> {
        self.check(params, s)?;
        let o = self.offsets();
        let w1 = nn::mlp_eval(&self.w1, &params[o[0]..o[1]], s)?;
        let b1 = nn::mlp_eval(&self.b1, &params[o[1]..o[2]], s)?;
        let w2 = nn::mlp_eval(&self.w2, &params[o[2]..o[3]], s)?;
        let b2 = nn::mlp_eval(&self.b2, &params[o[3]..o[4]], s)?;
        Ok(MixWeights {
            w1: Matrix::from_vec(
                self.shape.width,
                self.shape.agents,
                w1.into_iter().map(f64::abs).collect(),
            ),
            b1,
            w2: w2.into_iter().map(f64::abs).collect(),
            b2: b2[0],
        })
    }

    pub fn forward(&self, params: &[f64], v_agg: &[f64], s: &[f64]) -> Result<MixForward> {
        self.check(params, s)?;
        if v_agg.len() != self.shape.agents {
            return Err(Error::dim("mixer values", self.shape.agents, v_agg.len()));
        }
        let o = self.offsets();
        let (raw_w1, t0) = nn::mlp_forward(&self.w1, &params[o[0]..o[1]], s)?;
        let (b1, t1) = nn::mlp_forward(&self.b1, &params[o[1]..o[2]], s)?;
        let (raw_w2, t2) = nn::mlp_forward(&self.w2, &params[o[2]..o[3]], s)?;
        let (b2, t3) = nn::mlp_forward(&self.b2, &params[o[3]..o[4]], s)?;
        let weights = MixWeights {
            w1: Matrix::from_vec(
                self.shape.width,
                self.shape.agents,
                raw_w1.iter().map(|x| x.abs()).collect(),
            ),
            b1,
            w2: raw_w2.iter().map(|x| x.abs()).collect(),
            b2: b2[0],
        };
        let pre: Vec<f64> = weights
            .w1
            .matvec(v_agg)
            .iter()
            .zip(&weights.b1)
            .map(|(a, b)| a + b)
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|&x| self.elu_sign * elu(x)).collect();
        let v_tot = dot(&weights.w2, &hidden) + weights.b2;
        Ok(MixForward {
            v_tot,
            weights,
            raw_w1,
            raw_w2,
            v_agg: v_agg.to_vec(),
            pre,
            hidden,
            tapes: [t0, t1, t2, t3],
        })
    }

    /// Accumulates `upstream · ∂V_tot/∂ω` into `grads` and returns
    /// `upstream · ∂V_tot/∂v_agg`.
    pub fn backward(&self, params: &[f64], fwd: MixForward, upstream: f64, grads: &mut [f64]) -> Result<Vec<f64>> {
        if grads.len() != self.param_count() {
            return Err(Error::dim("mixer grads", self.param_count(), grads.len()));
        }
        let (c, n) = (self.shape.width, self.shape.agents);
        let o = self.offsets();
        let d_w2: Vec<f64> = fwd
            .hidden
            .iter()
            .zip(&fwd.raw_w2)
            .map(|(h, r)| upstream * h * sign(*r))
            .collect();
        let d_pre: Vec<f64> = (0..c)
            .map(|k| upstream * fwd.weights.w2[k] * self.elu_sign * elu_derivative(fwd.pre[k]))
            .collect();
        let mut d_w1 = vec![0.0; c * n];
        for k in 0..c {
            for i in 0..n {
                d_w1[k * n + i] = d_pre[k] * fwd.v_agg[i] * sign(fwd.raw_w1[k * n + i]);
            }
        }
        let d_v = fwd.weights.w1.matvec_t(&d_pre);
        let [t0, t1, t2, t3] = fwd.tapes;
        let (g0, rest) = grads.split_at_mut(o[1]);
        let (g1, rest) = rest.split_at_mut(o[2] - o[1]);
        let (g2, g3) = rest.split_at_mut(o[3] - o[2]);
        nn::backward(&self.w1, &params[o[0]..o[1]], t0, &d_w1, g0)?;
        nn::backward(&self.b1, &params[o[1]..o[2]], t1, &d_pre, g1)?;
        nn::backward(&self.w2, &params[o[2]..o[3]], t2, &d_w2, g2)?;
        nn::backward(&self.b2, &params[o[3]..o[4]], t3, &[upstream], g3)?;
        Ok(d_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    #[allow(unused_imports)]
    use num_traits::Float;
    use rand::{Rng, SeedableRng};

    fn mixer() -> Mixer {
        Mixer::new(MixerShape {
            state_dim: 5,
            agents: 3,
            width: 4,
            hyper_hidden: 8,
        })
        .unwrap()
    }

    fn random_params(m: &Mixer, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; m.param_count()];
        m.init_params(&mut p, &mut SimRng::seed_from_u64(seed));
        p
    }

    #[test]
    fn zero_hypernets_give_zero_weights() {
        let m = mixer();
        let p = vec![0.0; m.param_count()];
        let w = m.generate_weights(&p, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(w.w1.as_slice().iter().all(|&x| x == 0.0));
        assert!(w.w2.iter().all(|&x| x == 0.0));
        assert!(w.b1.iter().all(|&x| x == 0.0));
        assert_eq!(w.b2, 0.0);
    }

    #[test]
    fn generated_weights_non_negative_and_pure() {
        let m = mixer();
        let p = random_params(&m, 3);
        let mut rng = SimRng::seed_from_u64(4);
        for _ in 0..50 {
            let s: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = m.generate_weights(&p, &s).unwrap();
            assert!(w.w1.as_slice().iter().all(|&x| x >= 0.0));
            assert!(w.w2.iter().all(|&x| x >= 0.0));
            assert_eq!(w, m.generate_weights(&p, &s).unwrap());
        }
    }

    #[test]
    fn state_width_checked() {
        let m = mixer();
        let p = random_params(&m, 3);
        assert!(m.generate_weights(&p, &[0.0; 4]).is_err());
    }

    #[test]
    fn hand_elu_case() {
        let w = MixWeights {
            w1: Matrix::identity(2),
            b1: vec![0.0, 0.0],
            w2: vec![1.0, 1.0],
            b2: 0.0,
        };
        let v = mix(&w, &[1.0, -1.0]);
        assert_abs_diff_eq!(v, 1.0 + ((-1.0f64).exp() - 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.36787944117144233, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_mixers() {
        let w = MixWeights {
            w1: Matrix::from_rows(&[&[0.3, 2.0], &[1.0, 0.5]]),
            b1: vec![0.0, 0.0],
            w2: vec![0.0, 0.0],
            b2: -0.7,
        };
        assert_eq!(mix(&w, &[5.0, -9.0]), -0.7);
        let w = MixWeights { w2: vec![1.0, 2.0], ..w };
        assert_eq!(mix(&w, &[0.0, 0.0]), -0.7);
    }

    #[test]
    fn forward_matches_generate_then_mix() {
        let m = mixer();
        let p = random_params(&m, 8);
        let s = [0.2, -0.1, 0.5, 1.0, -2.0];
        let v = [0.4, -0.9, 1.7];
        let f = m.forward(&p, &v, &s).unwrap();
        let w = m.generate_weights(&p, &s).unwrap();
        assert_eq!(f.v_tot, mix(&w, &v));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = mixer();
        let p = random_params(&m, 21);
        let s = [0.3, -0.6, 0.9, 0.1, -1.2];
        let v = [0.5, -0.2, 1.4];
        let f = m.forward(&p, &v, &s).unwrap();
        let mut grads = vec![0.0; p.len()];
        let dv = m.backward(&p, f, 1.0, &mut grads).unwrap();
        let h = 1e-6;
        let eval = |p: &[f64], v: &[f64]| m.forward(p, v, &s).unwrap().v_tot;
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += h;
            let fp = eval(&q, &v);
            q[i] -= 2.0 * h;
            let fm = eval(&q, &v);
            let fd = (fp - fm) / (2.0 * h);
            assert_abs_diff_eq!(grads[i], fd, epsilon = 1e-7 * (1.0 + fd.abs()));
        }
        for i in 0..3 {
            let mut w = v;
            w[i] += h;
            let fp = eval(&p, &w);
            w[i] -= 2.0 * h;
            let fm = eval(&p, &w);
            assert_abs_diff_eq!(dv[i], (fp - fm) / (2.0 * h), epsilon = 1e-7);
            assert!(dv[i] >= 0.0);
        }
    }
}
