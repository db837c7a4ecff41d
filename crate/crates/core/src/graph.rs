//! The underlying communication graph, random edge sampling, and the
//! expectation / spectral analysis of sampled shift operators.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SimRng;

/// Which matrix a sampled subgraph contributes as its shift operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftVariant {
    /// `S = L_k`, the Laplacian of the sampled subgraph.
    Laplacian,
    /// `S = A_k + I`.
    #[serde(alias = "adjacency")]
    AdjacencyPlusIdentity,
}

/// Wire form of a graph: `{"n": 3, "edges": [[0, 1], [1, 2]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

/// Undirected, unweighted graph with fixed vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Matrix,
    laplacian: Matrix,
}

impl Graph {
    /// Validates the edge list and fills adjacency and Laplacian.
    /// Edges are stored as `(min, max)` pairs in input order.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one vertex".into()));
        }
        let mut adjacency = Matrix::zeros(n, n);
        let mut stored = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) references a vertex outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {a}")));
            }
            if adjacency[(a, b)] != 0.0 {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
            stored.push((a.min(b), a.max(b)));
        }
        let laplacian = laplacian_of(n, &stored);
        Ok(Graph {
            n,
            edges: stored,
            adjacency,
            laplacian,
        })
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        Self::new(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges)
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        let edges: Vec<_> = spec.edges.iter().map(|e| (e[0], e[1])).collect();
        Self::new(spec.n, &edges)
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            n: self.n,
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &Matrix {
        &self.laplacian
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n)
            .map(|i| self.adjacency.row(i).iter().filter(|&&a| a != 0.0).count())
            .max()
            .unwrap_or(0)
    }

    /// Shift operator of the subgraph formed by `kept` edges.
    pub fn shift_matrix(&self, kept: &[(usize, usize)], variant: ShiftVariant) -> Matrix {
        match variant {
            ShiftVariant::Laplacian => laplacian_of(self.n, kept),
            ShiftVariant::AdjacencyPlusIdentity => {
                let mut m = Matrix::identity(self.n);
                for &(a, b) in kept {
                    m[(a, b)] += 1.0;
                    m[(b, a)] += 1.0;
                }
                m
            }
        }
    }

    /// `S̄ = E[S_k]`: `pL` for the Laplacian variant, `pA + I` otherwise.
    pub fn expected_shift(&self, p: f64, variant: ShiftVariant) -> Matrix {
        match variant {
            ShiftVariant::Laplacian => self.laplacian.scaled(p),
            ShiftVariant::AdjacencyPlusIdentity => {
                let mut m = Matrix::identity(self.n);
                m.add_scaled(&self.adjacency, p);
                m
            }
        }
    }
}

fn laplacian_of(n: usize, edges: &[(usize, usize)]) -> Matrix {
    let mut l = Matrix::zeros(n, n);
    for &(a, b) in edges {
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
        l[(a, b)] -= 1.0;
        l[(b, a)] -= 1.0;
    }
    l
}

/// Edge keep probability, restricted to `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub fn new(p: f64) -> Result<Self> {
        if p > 0.0 && p <= 1.0 {
            Ok(Probability(p))
        } else {
            Err(Error::param("p", format!("must lie in (0, 1], got {p}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        Probability::new(p)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub p: Probability,
    pub seed: u64,
}

/// One realized shift operator and the edges that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSample {
    pub variant: ShiftVariant,
    pub matrix: Matrix,
    pub kept_edges: Vec<(usize, usize)>,
}

/// Draws one subgraph: every edge of `g` survives independently with
/// probability `p`.
pub fn sample_shift(g: &Graph, p: Probability, variant: ShiftVariant, rng: &mut SimRng) -> ShiftSample {
    let p = p.get();
    let kept_edges: Vec<_> = g
        .edges()
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < p)
        .collect();
    ShiftSample {
        variant,
        matrix: g.shift_matrix(&kept_edges, variant),
        kept_edges,
    }
}

/// A random edge sampler that owns its stream.
#[derive(Debug, Clone)]
pub struct EdgeSampler {
    p: Probability,
    rng: SimRng,
}

impl EdgeSampler {
    pub fn new(cfg: SamplerConfig) -> Self {
        use rand::SeedableRng;
        EdgeSampler {
            p: cfg.p,
            rng: SimRng::seed_from_u64(cfg.seed),
        }
    }

    pub fn sample(&mut self, g: &Graph, variant: ShiftVariant) -> ShiftSample {
        sample_shift(g, self.p, variant, &mut self.rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankWitness {
    pub eigenvalues: Vec<f64>,
    pub min_abs_eigenvalue: f64,
    pub is_full_rank: bool,
}

pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// `h₀I + Σ_{k≥1} h_k S̄^k` for the expected shift `S̄`.
pub fn expected_polynomial(g: &Graph, h: &[f64], p: f64, variant: ShiftVariant) -> Matrix {
    let n = g.n_vertices();
    let s_bar = g.expected_shift(p, variant);
    let mut out = Matrix::zeros(n, n);
    let mut power = Matrix::identity(n);
    for (k, &hk) in h.iter().enumerate() {
        if k > 0 {
            power = s_bar.matmul(&power);
        }
        out.add_scaled(&power, hk);
    }
    out
}

/// Checks that the expected filter response is invertible. The positivity
/// precondition (`h₀ > 0`, `h_k ≥ 0`) is where the bound `λ_min ≥ h₀`
/// holds for the Laplacian variant, so other inputs are rejected.
pub fn full_rank_witness(
    g: &Graph,
    h: &[f64],
    p: f64,
    variant: ShiftVariant,
    tol: f64,
) -> Result<RankWitness> {
    match h.split_first() {
        Some((&h0, rest)) if h0 > 0.0 && rest.iter().all(|&hk| hk >= 0.0) => {}
        _ => {
            return Err(Error::param(
                "h",
                "full-rank witness requires h0 > 0 and h_k >= 0 for k >= 1",
            ))
        }
    }
    let eigenvalues = expected_polynomial(g, h, p, variant).symmetric_eigenvalues();
    let min_abs_eigenvalue = eigenvalues.iter().fold(f64::INFINITY, |m, e| m.min(e.abs()));
    Ok(RankWitness {
        is_full_rank: min_abs_eigenvalue > tol,
        eigenvalues,
        min_abs_eigenvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn two_vertex_laplacian() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        assert_eq!(g.laplacian(), &mat(&[&[1.0, -1.0], &[-1.0, 1.0]]));
    }

    #[test]
    fn complete_three_laplacian() {
        let g = Graph::complete(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 } else { -1.0 };
                assert_eq!(g.laplacian()[(i, j)], want);
            }
        }
    }

    #[test]
    fn complete_four_degrees() {
        let g = Graph::complete(4).unwrap();
        for i in 0..4 {
            assert_eq!(g.adjacency().row(i).iter().sum::<f64>(), 3.0);
        }
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(matches!(Graph::new(3, &[(1, 1)]), Err(Error::InvalidGraph(_))));
        assert!(matches!(Graph::new(3, &[(0, 3)]), Err(Error::InvalidGraph(_))));
        assert!(matches!(Graph::new(3, &[(0, 1), (1, 0)]), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn probability_bounds() {
        assert!(Probability::new(0.0).is_err());
        assert!(Probability::new(1.0).is_ok());
        assert!(Probability::new(1.5).is_err());
        assert!(Probability::new(f64::NAN).is_err());
    }

    #[test]
    fn p_one_keeps_everything() {
        let g = Graph::complete(5).unwrap();
        let mut rng = SimRng::seed_from_u64(1);
        let p = Probability::new(1.0).unwrap();
        let s = sample_shift(&g, p, ShiftVariant::Laplacian, &mut rng);
        assert_eq!(&s.matrix, g.laplacian());
        let s = sample_shift(&g, p, ShiftVariant::AdjacencyPlusIdentity, &mut rng);
        assert_eq!(s.matrix, g.expected_shift(1.0, ShiftVariant::AdjacencyPlusIdentity));
    }

    #[test]
    fn empty_subgraph_shifts() {
        let g = Graph::complete(3).unwrap();
        assert_eq!(g.shift_matrix(&[], ShiftVariant::Laplacian), Matrix::zeros(3, 3));
        assert_eq!(
            g.shift_matrix(&[], ShiftVariant::AdjacencyPlusIdentity),
            Matrix::identity(3)
        );
        // With a tiny p every coin flip fails for this seed.
        let mut rng = SimRng::seed_from_u64(0);
        let s = sample_shift(&g, Probability::new(1e-12).unwrap(), ShiftVariant::Laplacian, &mut rng);
        assert!(s.kept_edges.is_empty());
        assert_eq!(s.matrix, Matrix::zeros(3, 3));
    }

    #[test]
    fn path_expected_laplacian() {
        let g = Graph::path(2).unwrap();
        let e = g.expected_shift(0.5, ShiftVariant::Laplacian);
        assert_eq!(e, mat(&[&[0.5, -0.5], &[-0.5, 0.5]]));
    }

    #[test]
    fn complete_four_adjacency_spectrum() {
        let g = Graph::complete(4).unwrap();
        let e = g
            .expected_shift(0.5, ShiftVariant::AdjacencyPlusIdentity)
            .symmetric_eigenvalues();
        for (a, b) in e.iter().zip([0.5, 0.5, 0.5, 2.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn witness_on_path() {
        let g = Graph::path(2).unwrap();
        let w = full_rank_witness(&g, &[1.0, 1.0], 0.5, ShiftVariant::Laplacian, DEFAULT_RANK_TOL).unwrap();
        assert_abs_diff_eq!(w.eigenvalues[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.eigenvalues[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.min_abs_eigenvalue, 1.0, epsilon = 1e-12);
        assert!(w.is_full_rank);
    }

    #[test]
    fn witness_constant_filter_is_scaled_identity() {
        let g = Graph::complete(5).unwrap();
        let h = [0.3, 0.0, 0.0, 0.0];
        for variant in [ShiftVariant::Laplacian, ShiftVariant::AdjacencyPlusIdentity] {
            let m = expected_polynomial(&g, &h, 0.7, variant);
            assert_eq!(m, Matrix::identity(5).scaled(0.3));
            let w = full_rank_witness(&g, &h, 0.7, variant, DEFAULT_RANK_TOL).unwrap();
            assert_abs_diff_eq!(w.min_abs_eigenvalue, 0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn witness_complete_adjacency() {
        let g = Graph::complete(4).unwrap();
        let w = full_rank_witness(&g, &[1.0, 1.0, 1.0], 0.7, ShiftVariant::AdjacencyPlusIdentity, DEFAULT_RANK_TOL)
            .unwrap();
        assert!(w.is_full_rank);
        // Oracle: eigenvalues of S̄ are 1+3p and 1-p, so the polynomial maps them to 1+λ+λ².
        let lam = [1.0 - 0.7, 1.0 + 3.0 * 0.7];
        let want_min = lam.iter().map(|l| 1.0 + l + l * l).fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(w.min_abs_eigenvalue, want_min, epsilon = 1e-10);
    }

    #[test]
    fn witness_rejects_negative_coefficients() {
        let g = Graph::path(3).unwrap();
        assert!(full_rank_witness(&g, &[0.0, 1.0], 0.5, ShiftVariant::Laplacian, 1e-9).is_err());
        assert!(full_rank_witness(&g, &[1.0, -1.0], 0.5, ShiftVariant::Laplacian, 1e-9).is_err());
        assert!(full_rank_witness(&g, &[], 0.5, ShiftVariant::Laplacian, 1e-9).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let g = Graph::new(4, &[(0, 1), (3, 2)]).unwrap();
        let spec = g.to_spec();
        assert_eq!(spec.edges, vec![[0, 1], [2, 3]]);
        assert_eq!(Graph::from_spec(&spec).unwrap(), g);
    }
}
