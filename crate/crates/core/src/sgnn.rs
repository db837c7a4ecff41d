//! Stochastic graph neural network: `F` parallel order-`K` graph filters,
//! each driven by its own freshly sampled shift sequence, followed by a ReLU
//! and a per-node READOUT that folds the `F` channels into one value.
//!
//! Parameter layout inside the slice handed to every function: the `F×(K+1)`
//! filter coefficients row by row (`h_f0..h_fK`), then the READOUT MLP.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sample_shift, Graph, Probability, ShiftVariant};
use crate::linalg::Matrix;
use crate::nn::{self, Activation, MlpSpec, Tape};
use crate::rng::SimRng;

/// Per-node READOUT shape: `F → hidden → 1`, weights shared across nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for Readout {
    fn default() -> Self {
        Readout {
            hidden: 16,
            activation: Activation::Elu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    filters: usize,
    order: usize,
    variant: ShiftVariant,
    p: Probability,
    readout: MlpSpec,
}

impl FilterBank {
    pub fn new(filters: usize, order: usize, variant: ShiftVariant, p: Probability, readout: Readout) -> Result<Self> {
        if filters == 0 {
            return Err(Error::param("sgnn.filters", "need at least one filter"));
        }
        if readout.hidden == 0 {
            return Err(Error::param("sgnn.readout_hidden", "must be positive"));
        }
        Ok(FilterBank {
            filters,
            order,
            variant,
            p,
            readout: MlpSpec::new(filters, &[readout.hidden], readout.activation, 1),
        })
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn variant(&self) -> ShiftVariant {
        self.variant
    }

    pub fn p(&self) -> Probability {
        self.p
    }

    pub fn readout_spec(&self) -> &MlpSpec {
        &self.readout
    }

    pub fn coeff_count(&self) -> usize {
        self.filters * (self.order + 1)
    }

    pub fn param_count(&self) -> usize {
        self.coeff_count() + self.readout.param_count()
    }

    /// Coefficients of filter `f`: `h_f0..h_fK`.
    pub fn coeffs<'a>(&self, params: &'a [f64], f: usize) -> &'a [f64] {
        let k1 = self.order + 1;
        &params[f * k1..(f + 1) * k1]
    }

    pub fn coeff_matrix(&self, params: &[f64]) -> Vec<Vec<f64>> {
        (0..self.filters).map(|f| self.coeffs(params, f).to_vec()).collect()
    }

    fn readout_params<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.coeff_count()..]
    }

    /// Coefficients shrink geometrically with order relative to a bound on
    /// the spectral radius of `S̄`, so the high-order taps do not swamp the
    /// signal at initialization.
    pub fn init_params(&self, params: &mut [f64], g: &Graph, rng: &mut SimRng) {
        assert_eq!(params.len(), self.param_count());
        let p = self.p.get();
        let d = g.max_degree() as f64;
        let radius = match self.variant {
            ShiftVariant::Laplacian => (2.0 * p * d).max(1.0),
            ShiftVariant::AdjacencyPlusIdentity => 1.0 + p * d,
        };
        let k1 = self.order + 1;
        for f in 0..self.filters {
            for k in 0..k1 {
                let scale = radius.powi(-(k as i32));
                params[f * k1 + k] = rng.random_range(-1.0..1.0) * scale;
            }
        }
        let c = self.coeff_count();
        self.readout.init_params(&mut params[c..], rng);
    }

    /// Draws one shift sequence `S_1..S_K` per filter.
    pub fn sample_shifts(&self, g: &Graph, rng: &mut SimRng) -> Vec<Vec<Matrix>> {
        (0..self.filters)
            .map(|_| {
                (0..self.order)
                    .map(|_| sample_shift(g, self.p, self.variant, rng).matrix)
                    .collect()
            })
            .collect()
    }
}

/// `u = Σ_k h_k S_k⋯S_1 v`, via `V_k = S_k V_{k-1}`.
pub fn filter_forward(v: &[f64], h: &[f64], shifts: &[Matrix]) -> Result<Vec<f64>> {
    filter_trace(v, h, shifts).map(|(u, _)| u)
}

/// Filter output together with the diffused signals `V_0..V_K`.
fn filter_trace(v: &[f64], h: &[f64], shifts: &[Matrix]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if h.len() != shifts.len() + 1 {
        return Err(Error::dim("filter taps", shifts.len() + 1, h.len()));
    }
    let n = v.len();
    let mut signals = Vec::with_capacity(h.len());
    signals.push(v.to_vec());
    for s in shifts {
        if s.rows() != n || s.cols() != n {
            return Err(Error::dim("shift operator", n, s.rows()));
        }
        let next = s.matvec(signals.last().unwrap());
        signals.push(next);
    }
    let mut u = vec![0.0; n];
    for (hk, vk) in h.iter().zip(&signals) {
        for (ui, x) in u.iter_mut().zip(vk) {
            *ui += hk * x;
        }
    }
    Ok((u, signals))
}

/// Result of one stochastic forward pass, including everything the exact
/// backward pass needs about the realized randomness.
#[derive(Debug, Clone)]
pub struct SgnnOutput {
    pub v_agg: Vec<f64>,
    /// `V'_f` for each filter (row `f`), post-ReLU.
    pub per_filter: Matrix,
    /// `shift_log[f][k-1]` is `S_{f,k}`.
    pub shift_log: Vec<Vec<Matrix>>,
    filter_pre: Matrix,
    signals: Vec<Vec<Vec<f64>>>,
    readout_tapes: Vec<Tape>,
}

/// Forward pass with freshly sampled shifts.
pub fn sgnn_forward(bank: &FilterBank, params: &[f64], v: &[f64], g: &Graph, rng: &mut SimRng) -> Result<SgnnOutput> {
    if g.n_vertices() != v.len() {
        return Err(Error::dim("sgnn input", g.n_vertices(), v.len()));
    }
    let shifts = bank.sample_shifts(g, rng);
    sgnn_forward_with_shifts(bank, params, v, shifts)
}

/// Forward pass over a given realization of the shift sequences.
pub fn sgnn_forward_with_shifts(
    bank: &FilterBank,
    params: &[f64],
    v: &[f64],
    shifts: Vec<Vec<Matrix>>,
) -> Result<SgnnOutput> {
    if params.len() != bank.param_count() {
        return Err(Error::dim("sgnn params", bank.param_count(), params.len()));
    }
    if shifts.len() != bank.filters {
        return Err(Error::dim("shift sequences", bank.filters, shifts.len()));
    }
    let n = v.len();
    let mut per_filter = Matrix::zeros(bank.filters, n);
    let mut filter_pre = Matrix::zeros(bank.filters, n);
    let mut signals = Vec::with_capacity(bank.filters);
    for (f, seq) in shifts.iter().enumerate() {
        let (u, sig) = filter_trace(v, bank.coeffs(params, f), seq)?;
        for (i, &ui) in u.iter().enumerate() {
            filter_pre[(f, i)] = ui;
            per_filter[(f, i)] = ui.max(0.0);
        }
        signals.push(sig);
    }
    let readout_params = bank.readout_params(params);
    let mut v_agg = Vec::with_capacity(n);
    let mut readout_tapes = Vec::with_capacity(n);
    let mut features = vec![0.0; bank.filters];
    for i in 0..n {
        for (f, x) in features.iter_mut().enumerate() {
            *x = per_filter[(f, i)];
        }
        let (y, tape) = nn::mlp_forward(&bank.readout, readout_params, &features)?;
        v_agg.push(y[0]);
        readout_tapes.push(tape);
    }
    Ok(SgnnOutput {
        v_agg,
        per_filter,
        shift_log: shifts,
        filter_pre,
        signals,
        readout_tapes,
    })
}

/// Backward pass through a recorded forward pass with the shifts held fixed.
/// Accumulates into `grads` (same layout as `params`) and returns `∂/∂v`.
pub fn sgnn_backward(
    bank: &FilterBank,
    params: &[f64],
    out: SgnnOutput,
    upstream: &[f64],
    grads: &mut [f64],
) -> Result<Vec<f64>> {
    let n = out.v_agg.len();
    if upstream.len() != n {
        return Err(Error::dim("sgnn upstream", n, upstream.len()));
    }
    if grads.len() != params.len() {
        return Err(Error::dim("sgnn grads", params.len(), grads.len()));
    }
    let c = bank.coeff_count();
    let (coeff_grads, readout_grads) = grads.split_at_mut(c);
    let readout_params = bank.readout_params(params);
    // dL/dV'_{f,i}
    let mut d_feat = Matrix::zeros(bank.filters, n);
    for (i, tape) in out.readout_tapes.into_iter().enumerate() {
        let dx = nn::backward(&bank.readout, readout_params, tape, &[upstream[i]], readout_grads)?;
        for (f, d) in dx.into_iter().enumerate() {
            d_feat[(f, i)] = d;
        }
    }
    let k1 = bank.order + 1;
    let mut dv = vec![0.0; n];
    for f in 0..bank.filters {
        let du: Vec<f64> = (0..n)
            .map(|i| if out.filter_pre[(f, i)] > 0.0 { d_feat[(f, i)] } else { 0.0 })
            .collect();
        if du.iter().all(|&d| d == 0.0) {
            continue;
        }
        let h = bank.coeffs(params, f);
        let sig = &out.signals[f];
        for k in 0..k1 {
            coeff_grads[f * k1 + k] += crate::linalg::dot(&du, &sig[k]);
        }
        // g_K = h_K du;  g_k = h_k du + S_{k+1}ᵀ g_{k+1}
        let mut g: Vec<f64> = du.iter().map(|d| h[bank.order] * d).collect();
        for k in (0..bank.order).rev() {
            let back = out.shift_log[f][k].matvec_t(&g);
            g = back.iter().zip(&du).map(|(b, d)| b + h[k] * d).collect();
        }
        for (a, b) in dv.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok(dv)
}

/// `E[H_f(S_{K:0})] = h_f0 I + Σ_k h_fk S̄^k` for every filter.
pub fn expected_filter_response(bank: &FilterBank, params: &[f64], g: &Graph) -> Vec<Matrix> {
    (0..bank.filters)
        .map(|f| crate::graph::expected_polynomial(g, bank.coeffs(params, f), bank.p.get(), bank.variant))
        .collect()
}
