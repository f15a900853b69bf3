//! Orthonormal polynomial bases and deterministic PCE evaluation.
//!
//! Two 1D families are supported: Legendre on a box (inputs affinely
//! mapped to [-1,1]) and moment-based arbitrary polynomial chaos built
//! from a weight distribution. Multivariate bases are tensor products
//! truncated by total degree.

use crate::numerics::{DistributionSpec, RngStream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("point dimension {point_dim} does not match basis dimension {basis_dim}")]
    DimensionMismatch { point_dim: usize, basis_dim: usize },
    #[error("coefficient length {coeffs} does not match index set size {terms}")]
    CoefficientMismatch { coeffs: usize, terms: usize },
    #[error("ill-conditioned moment matrix at degree {degree}; weight moments are numerically degenerate")]
    IllConditionedBasis { degree: usize },
}

/// Total-degree truncated multi-index set in graded-lexicographic order;
/// index 0 is the all-zeros tuple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    dim: usize,
    max_total_degree: usize,
    indices: Vec<Vec<usize>>,
}

impl MultiIndexSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_total_degree(&self) -> usize {
        self.max_total_degree
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// All multi-indices with component sum <= `degree`, graded-lex ordered
/// (cardinality `binomial(dim + degree, degree)`).
pub fn truncation_indices(dim: usize, degree: usize) -> MultiIndexSet {
    assert!(dim >= 1, "dim must be positive");
    let mut indices = Vec::new();
    for total in 0..=degree {
        let mut prefix = Vec::with_capacity(dim);
        grade_tuples(dim, total, &mut prefix, &mut indices);
    }
    MultiIndexSet {
        dim,
        max_total_degree: degree,
        indices,
    }
}

fn grade_tuples(dim: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if dim == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    // Leading coordinate descends so (1,0) precedes (0,1) within a grade.
    for lead in (0..=total).rev() {
        prefix.push(lead);
        grade_tuples(dim - 1, total - lead, prefix, out);
        prefix.pop();
    }
}

/// Value of the orthonormal Legendre polynomial `sqrt(2n+1)·P_n(t)`,
/// orthonormal under the Uniform(-1,1) probability weight. `|t| > 1` is
/// permitted and evaluates the same recurrence (extrapolation).
pub fn legendre_orthonormal(degree: usize, t: f64) -> f64 {
    let (vals, _) = legendre_all(degree, t);
    vals[degree]
}

/// Orthonormal Legendre values and derivatives for degrees `0..=max`.
fn legendre_all(max: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; max + 1];
    let mut dp = vec![0.0; max + 1];
    p[0] = 1.0;
    if max >= 1 {
        p[1] = t;
        dp[1] = 1.0;
    }
    for n in 1..max {
        let nf = n as f64;
        p[n + 1] = ((2.0 * nf + 1.0) * t * p[n] - nf * p[n - 1]) / (nf + 1.0);
        dp[n + 1] = dp[n - 1] + (2.0 * nf + 1.0) * p[n];
    }
    for n in 0..=max {
        let scale = ((2 * n + 1) as f64).sqrt();
        p[n] *= scale;
        dp[n] *= scale;
    }
    (p, dp)
}

/// One-dimensional orthonormal family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Basis1d {
    /// Legendre after the affine map [lo,hi] -> [-1,1].
    LegendreOnBox { lo: f64, hi: f64 },
    /// Arbitrary polynomial chaos: `rows[n]` holds the monomial
    /// coefficients of the degree-n orthonormal polynomial.
    Apc { rows: Vec<Vec<f64>> },
}

impl Basis1d {
    /// Values for degrees `0..=max` at `x` (natural coordinates).
    pub fn eval_all(&self, max: usize, x: f64) -> Vec<f64> {
        self.eval_all_with_deriv(max, x).0
    }

    /// Values and derivatives w.r.t. `x` for degrees `0..=max`.
    pub fn eval_all_with_deriv(&self, max: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::LegendreOnBox { lo, hi } => {
                let slope = 2.0 / (hi - lo);
                let t = (x - lo) * slope - 1.0;
                let (vals, derivs) = legendre_all(max, t);
                (vals, derivs.into_iter().map(|d| d * slope).collect())
            }
            Self::Apc { rows } => {
                assert!(max < rows.len(), "aPC table built to degree {}, asked {max}", rows.len() - 1);
                let mut vals = Vec::with_capacity(max + 1);
                let mut derivs = Vec::with_capacity(max + 1);
                for row in rows.iter().take(max + 1) {
                    let mut v = 0.0;
                    let mut d = 0.0;
                    // Horner for value and derivative.
                    for &coef in row.iter().rev() {
                        d = d * x + v;
                        v = v * x + coef;
                    }
                    vals.push(v);
                    derivs.push(d);
                }
                (vals, derivs)
            }
        }
    }
}

/// Orthonormal monomial-coefficient rows for degrees `0..=max_degree`
/// under the given weight distribution.
///
/// Moments enter a Hankel matrix whose Cholesky factor is inverted to
/// orthonormalize the monomial family. Moments are analytic where the
/// distribution has a closed form and estimated from 10^6 Monte Carlo
/// samples otherwise.
pub fn apc_basis_1d(
    weight: &DistributionSpec,
    max_degree: usize,
) -> Result<Vec<Vec<f64>>, PolyError> {
    let n_moments = 2 * max_degree + 1;
    let moments = match weight.raw_moment(1) {
        Some(_) => (0..n_moments)
            .map(|k| weight.raw_moment(k).expect("closed-form family"))
            .collect::<Vec<f64>>(),
        None => monte_carlo_moments(weight, n_moments),
    };
    let k = max_degree + 1;
    let mut hankel = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            hankel[i][j] = moments[i + j];
        }
    }
    let lower = cholesky(&hankel).map_err(|degree| PolyError::IllConditionedBasis { degree })?;
    let inv = invert_lower_triangular(&lower);
    Ok(inv
        .into_iter()
        .enumerate()
        .map(|(n, row)| row.into_iter().take(n + 1).collect())
        .collect())
}

fn monte_carlo_moments(weight: &DistributionSpec, n_moments: usize) -> Vec<f64> {
    let n = 1_000_000usize;
    let mut rng = RngStream::new(0x4150_4331, 0); // fixed stream: the table must be deterministic
    let mut sums = vec![0.0; n_moments];
    for _ in 0..n {
        let x = weight.sample(&mut rng);
        let mut pow = 1.0;
        for s in sums.iter_mut() {
            *s += pow;
            pow *= x;
        }
    }
    sums.into_iter().map(|s| s / n as f64).collect()
}

/// Cholesky of a symmetric positive-definite matrix; on a non-positive
/// pivot returns the offending row index.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, usize> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= a[i][i] * 1e-14 {
                    return Err(i);
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

fn invert_lower_triangular(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = l.len();
    let mut inv = vec![vec![0.0; n]; n];
    for i in 0..n {
        inv[i][i] = 1.0 / l[i][i];
        for j in 0..i {
            let mut sum = 0.0;
            for k in j..i {
                sum += l[i][k] * inv[k][j];
            }
            inv[i][j] = -sum / l[i][i];
        }
    }
    inv
}

/// Per-dimension 1D families forming a tensor-product basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub dims: Vec<Basis1d>,
}

impl BasisSpec {
    pub fn dim(&self) -> usize {
        self.dims.len()
    }
}

/// Multivariate basis values `Ψ(point)` in index-set order.
pub fn basis_eval(
    basis: &BasisSpec,
    index_set: &MultiIndexSet,
    point: &[f64],
) -> Result<Vec<f64>, PolyError> {
    Ok(basis_eval_with_grad(basis, index_set, point)?.0)
}

/// Basis values plus partial derivatives: `grads[j][d] = ∂Ψ_d/∂x_j`.
pub fn basis_eval_with_grad(
    basis: &BasisSpec,
    index_set: &MultiIndexSet,
    point: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>), PolyError> {
    let dim = index_set.dim();
    if point.len() != dim || basis.dims.len() != dim {
        return Err(PolyError::DimensionMismatch {
            point_dim: point.len(),
            basis_dim: basis.dims.len().min(dim),
        });
    }
    let max = index_set.max_total_degree();
    let per_dim: Vec<(Vec<f64>, Vec<f64>)> = basis
        .dims
        .iter()
        .zip(point)
        .map(|(b, &x)| b.eval_all_with_deriv(max, x))
        .collect();
    let mut vals = Vec::with_capacity(index_set.len());
    let mut grads = vec![Vec::with_capacity(index_set.len()); dim];
    for tuple in index_set.indices() {
        let mut v = 1.0;
        for (j, &deg) in tuple.iter().enumerate() {
            v *= per_dim[j].0[deg];
        }
        vals.push(v);
        for j in 0..dim {
            let mut g = per_dim[j].1[tuple[j]];
            for (k, &deg) in tuple.iter().enumerate() {
                if k != j {
                    g *= per_dim[k].0[deg];
                }
            }
            grads[j].push(g);
        }
    }
    Ok((vals, grads))
}

/// A polynomial chaos expansion: basis, truncation, and coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceModel {
    pub basis: BasisSpec,
    pub index_set: MultiIndexSet,
    pub coefficients: Vec<f64>,
}

impl PceModel {
    pub fn new(
        basis: BasisSpec,
        index_set: MultiIndexSet,
        coefficients: Vec<f64>,
    ) -> Result<Self, PolyError> {
        if coefficients.len() != index_set.len() {
            return Err(PolyError::CoefficientMismatch {
                coeffs: coefficients.len(),
                terms: index_set.len(),
            });
        }
        Ok(Self {
            basis,
            index_set,
            coefficients,
        })
    }
}

/// `Σ c_d Ψ_d(point)`.
pub fn pce_predict(model: &PceModel, point: &[f64]) -> Result<f64, PolyError> {
    let vals = basis_eval(&model.basis, &model.index_set, point)?;
    Ok(dot(&model.coefficients, &vals))
}

/// Prediction plus gradient w.r.t. the point coordinates.
pub fn pce_predict_with_grad(model: &PceModel, point: &[f64]) -> Result<(f64, Vec<f64>), PolyError> {
    let (vals, grads) = basis_eval_with_grad(&model.basis, &model.index_set, point)?;
    let value = dot(&model.coefficients, &vals);
    let grad = grads.iter().map(|g| dot(&model.coefficients, g)).collect();
    Ok((value, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
