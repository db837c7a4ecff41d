//! Spectral report for a graph, a filter and an edge keep probability.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use svmix_core::graph::{
    expected_polynomial, full_rank_witness, sample_shift, GraphSpec, Probability, RankWitness, DEFAULT_RANK_TOL,
};
use svmix_core::rng::{self, Stream};
use svmix_core::{Graph, Matrix, ShiftVariant};

/// `complete:N`, `path:N`, or a path to a graph JSON file.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphArg {
    Complete(usize),
    Path(usize),
    File(std::path::PathBuf),
}

impl FromStr for GraphArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let sized = |rest: &str| rest.parse::<usize>().map_err(|e| format!("bad vertex count `{rest}`: {e}"));
        if let Some(rest) = s.strip_prefix("complete:") {
            return sized(rest).map(GraphArg::Complete);
        }
        if let Some(rest) = s.strip_prefix("path:") {
            return sized(rest).map(GraphArg::Path);
        }
        Ok(GraphArg::File(s.into()))
    }
}

impl GraphArg {
    pub fn build(&self) -> Result<Graph> {
        Ok(match self {
            GraphArg::Complete(n) => Graph::complete(*n)?,
            GraphArg::Path(n) => Graph::path(*n)?,
            GraphArg::File(p) => Graph::from_spec(&crate::io::read_json::<GraphSpec>(p)?)?,
        })
    }
}

/// Comma-separated coefficients `h₀,h₁,…`, or a JSON file holding an array.
pub fn parse_coeffs(arg: &str) -> Result<Vec<f64>> {
    let path = Path::new(arg);
    let h: Vec<f64> = if path.is_file() {
        crate::io::read_json(path)?
    } else {
        arg.split(',')
            .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad coefficient `{x}`")))
            .collect::<Result<_>>()?
    };
    if h.is_empty() || h.iter().any(|x| !x.is_finite()) {
        bail!("coefficients must be a non-empty list of finite numbers");
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub matrix: Vec<Vec<f64>>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
}

impl Spectrum {
    fn of(m: &Matrix) -> Self {
        let mut eigenvalues = m.symmetric_eigenvalues();
        eigenvalues.sort_by(f64::total_cmp);
        Spectrum {
            matrix: (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
            eigenvalues,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub samples: usize,
    pub seed: u64,
    /// Largest entrywise gap between the sampled mean response and its expectation.
    pub max_abs_residual: f64,
    /// `max_abs_residual` over the largest entry of the expectation.
    pub relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub graph: GraphSpec,
    pub p: f64,
    pub variant: ShiftVariant,
    pub coeffs: Vec<f64>,
    pub expected_shift: Spectrum,
    pub expected_response: Spectrum,
    /// Absent when the coefficients violate `h₀ > 0, h_k ≥ 0`.
    pub full_rank: Option<RankWitness>,
    pub full_rank_note: Option<String>,
    pub monte_carlo: MonteCarlo,
}

/// Mean of `Σ_k h_k S_k⋯S_1` over `samples` independent shift sequences.
pub fn sampled_response_mean(g: &Graph, h: &[f64], p: Probability, variant: ShiftVariant, samples: usize, seed: u64) -> Matrix {
    let n = g.n_vertices();
    let mut rng = rng::stream(seed, Stream::Sgnn, 0);
    let mut acc = Matrix::zeros(n, n);
    let w = 1.0 / samples as f64;
    for _ in 0..samples {
        let mut power = Matrix::identity(n);
        acc.add_scaled(&power, h[0] * w);
        for &hk in &h[1..] {
            power = sample_shift(g, p, variant, &mut rng).matrix.matmul(&power);
            acc.add_scaled(&power, hk * w);
        }
    }
    acc
}

pub fn analyze(g: &Graph, h: &[f64], p: f64, variant: ShiftVariant, samples: usize, seed: u64) -> Result<Report> {
    let prob = Probability::new(p)?;
    if samples == 0 {
        bail!("at least one Monte Carlo sample is required");
    }
    let expected = expected_polynomial(g, h, p, variant);
    let (full_rank, full_rank_note) = match full_rank_witness(g, h, p, variant, DEFAULT_RANK_TOL) {
        Ok(w) => (Some(w), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mean = sampled_response_mean(g, h, prob, variant, samples, seed);
    let max_abs_residual = mean.max_abs_diff(&expected);
    let scale = expected.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(Report {
        graph: g.to_spec(),
        p,
        variant,
        coeffs: h.to_vec(),
        expected_shift: Spectrum::of(&g.expected_shift(p, variant)),
        expected_response: Spectrum::of(&expected),
        full_rank,
        full_rank_note,
        monte_carlo: MonteCarlo {
            samples,
            seed,
            max_abs_residual,
            relative_residual: if scale > 0.0 { max_abs_residual / scale } else { max_abs_residual },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn complete_four_adjacency_spectrum() {
        let g = Graph::complete(4).unwrap();
        let r = analyze(&g, &[1.0], 0.5, ShiftVariant::AdjacencyPlusIdentity, 10, 0).unwrap();
        let e = &r.expected_shift.eigenvalues;
        for &x in &e[..3] {
            assert_abs_diff_eq!(x, 0.5, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(e[3], 2.5, epsilon = 1e-9);
    }

    #[test]
    fn unit_impulse_response_is_identity() {
        let g = Graph::complete(3).unwrap();
        let r = analyze(&g, &[1.0, 0.0, 0.0], 0.4, ShiftVariant::Laplacian, 50, 1).unwrap();
        for (i, row) in r.expected_response.matrix.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                assert_eq!(x, if i == j { 1.0 } else { 0.0 });
            }
        }
        assert!(r.monte_carlo.max_abs_residual < 1e-12);
    }

    #[test]
    fn path_two_laplacian_minimum() {
        // I + 0.5 L with L = [[1, -1], [-1, 1]]: eigenvalues 1 and 2.
        let g = Graph::path(2).unwrap();
        let r = analyze(&g, &[1.0, 1.0], 0.5, ShiftVariant::Laplacian, 10, 0).unwrap();
        let w = r.full_rank.unwrap();
        assert_abs_diff_eq!(w.min_abs_eigenvalue, 1.0, epsilon = 1e-12);
        assert!(w.is_full_rank);
    }

    #[test]
    fn negative_coefficients_skip_the_witness() {
        let g = Graph::path(3).unwrap();
        let r = analyze(&g, &[1.0, -1.0], 0.5, ShiftVariant::Laplacian, 10, 0).unwrap();
        assert!(r.full_rank.is_none() && r.full_rank_note.is_some());
    }

    #[test]
    fn graph_args() {
        assert_eq!("complete:4".parse::<GraphArg>().unwrap(), GraphArg::Complete(4));
        assert_eq!("path:2".parse::<GraphArg>().unwrap(), GraphArg::Path(2));
        assert!("complete:x".parse::<GraphArg>().is_err());
        assert_eq!(parse_coeffs("1, 0.5,0").unwrap(), vec![1.0, 0.5, 0.0]);
        assert!(parse_coeffs("1,nan").is_err());
    }
}
