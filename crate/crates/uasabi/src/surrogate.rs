//! Bayesian polynomial-chaos surrogates: priors over coefficients and
//! error scale, the Gaussian surrogate likelihood, posterior fitting via
//! HMC, point-surrogate extraction, and error-adjusted predictive
//! sampling.

use crate::mcmc::{hmc_sample, McmcConfig, McmcError, TargetDensity};
use crate::numerics::{DistributionSpec, RngStream};
use crate::polychaos::{basis_eval, BasisSpec, MultiIndexSet, PceModel, PolyError};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("training rows are inconsistent: {0}")]
    InvalidTrainingSet(String),
    #[error("sigma prior must have positive support, got {0:?}")]
    InvalidSigmaPrior(DistributionSpec),
    #[error("sigma must be positive, got {0}")]
    SigmaDomain(f64),
    #[error("posterior contains no draws")]
    EmptyPosterior,
    #[error("MCMC did not converge: R-hat {rhat:.4} >= 1.01 for coordinates {coords:?}")]
    Unconverged { rhat: f64, coords: Vec<usize> },
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Sparse simulator evaluations the surrogate is fit to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingRow {
    pub inputs: Vec<f64>,
    pub params: Vec<f64>,
    pub output: f64,
}

impl TrainingRow {
    /// Concatenated (inputs, params) point in basis coordinates.
    pub fn point(&self) -> Vec<f64> {
        let mut p = self.inputs.clone();
        p.extend_from_slice(&self.params);
        p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateTrainingSet {
    pub rows: Vec<TrainingRow>,
}

impl SurrogateTrainingSet {
    pub fn new(rows: Vec<TrainingRow>) -> Result<Self, SurrogateError> {
        if let Some(first) = rows.first() {
            let (nx, nw) = (first.inputs.len(), first.params.len());
            for (i, row) in rows.iter().enumerate() {
                if row.inputs.len() != nx || row.params.len() != nw {
                    return Err(SurrogateError::InvalidTrainingSet(format!(
                        "row {i} has dims ({}, {}), expected ({nx}, {nw})",
                        row.inputs.len(),
                        row.params.len()
                    )));
                }
                if !row.output.is_finite()
                    || row.inputs.iter().chain(&row.params).any(|v| !v.is_finite())
                {
                    return Err(SurrogateError::InvalidTrainingSet(format!(
                        "row {i} contains non-finite values"
                    )));
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// SHA-256 of the row data, recorded in posterior provenance.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for row in &self.rows {
            for v in row.inputs.iter().chain(&row.params).chain([&row.output]) {
                hasher.update(v.to_le_bytes());
            }
            hasher.update([0xff]);
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Independent prior over each coefficient plus a positive-support prior
/// over the error scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurrogatePrior {
    pub coef: DistributionSpec,
    pub sigma: DistributionSpec,
}

impl SurrogatePrior {
    pub fn new(coef: DistributionSpec, sigma: DistributionSpec) -> Result<Self, SurrogateError> {
        let (lo, _) = sigma.support();
        if lo < 0.0 {
            return Err(SurrogateError::InvalidSigmaPrior(sigma));
        }
        Ok(Self { coef, sigma })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateProvenance {
    pub seed: u64,
    pub mcmc: McmcConfig,
    pub training_digest: String,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub design_condition: f64,
    pub accept_rate: Vec<f64>,
}

/// Joint posterior draws of (coefficients, sigma) sharing one basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogatePosterior {
    pub basis: BasisSpec,
    pub index_set: MultiIndexSet,
    /// `draws[i]` is `[c_0, ..., c_{K-1}, sigma]`.
    pub draws: Vec<Vec<f64>>,
    pub provenance: SurrogateProvenance,
}

impl SurrogatePosterior {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn n_coefficients(&self) -> usize {
        self.index_set.len()
    }

    pub fn coefficients(&self, draw: usize) -> &[f64] {
        &self.draws[draw][..self.n_coefficients()]
    }

    pub fn sigma(&self, draw: usize) -> f64 {
        self.draws[draw][self.n_coefficients()]
    }

    pub fn pce_for_draw(&self, draw: usize) -> PceModel {
        PceModel::new(
            self.basis.clone(),
            self.index_set.clone(),
            self.coefficients(draw).to_vec(),
        )
        .expect("draw length matches index set")
    }
}

/// Cached design-matrix target on the (c, log sigma) scale. The basis is
/// evaluated once per training set; the likelihood is linear in `c`
/// given the design.
pub struct SurrogateTarget {
    design: Vec<Vec<f64>>,
    outputs: Vec<f64>,
    coef_prior: DistributionSpec,
    sigma_prior: Option<DistributionSpec>,
    /// When `sigma_prior` is `None`, sigma is held at this value and the
    /// target has dimension K instead of K+1.
    fixed_sigma: f64,
    n_coefficients: usize,
}

impl SurrogateTarget {
    pub fn new(
        data: &SurrogateTrainingSet,
        basis: &BasisSpec,
        index_set: &MultiIndexSet,
        prior: &SurrogatePrior,
    ) -> Result<Self, SurrogateError> {
        let design = build_design(data, basis, index_set)?;
        Ok(Self {
            design,
            outputs: data.rows.iter().map(|r| r.output).collect(),
            coef_prior: prior.coef,
            sigma_prior: Some(prior.sigma),
            fixed_sigma: f64::NAN,
            n_coefficients: index_set.len(),
        })
    }

    pub fn with_fixed_sigma(
        data: &SurrogateTrainingSet,
        basis: &BasisSpec,
        index_set: &MultiIndexSet,
        coef_prior: DistributionSpec,
        sigma: f64,
    ) -> Result<Self, SurrogateError> {
        if sigma <= 0.0 {
            return Err(SurrogateError::SigmaDomain(sigma));
        }
        let design = build_design(data, basis, index_set)?;
        Ok(Self {
            design,
            outputs: data.rows.iter().map(|r| r.output).collect(),
            coef_prior,
            sigma_prior: None,
            fixed_sigma: sigma,
            n_coefficients: index_set.len(),
        })
    }

    fn value_grad(&self, coeffs: &[f64], sigma: f64, grad: &mut [f64]) -> f64 {
        let k = self.n_coefficients;
        let n = self.outputs.len();
        let inv_var = 1.0 / (sigma * sigma);
        let mut logp = -(n as f64) * (0.5 * (2.0 * std::f64::consts::PI).ln() + sigma.ln());
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        let mut sq_sum = 0.0;
        for (row, &y) in self.design.iter().zip(&self.outputs) {
            let pred: f64 = row.iter().zip(coeffs).map(|(p, c)| p * c).sum();
            let r = y - pred;
            sq_sum += r * r;
            for (g, p) in grad.iter_mut().zip(row) {
                *g += r * p * inv_var;
            }
        }
        logp -= 0.5 * sq_sum * inv_var;
        for (g, &c) in grad.iter_mut().zip(coeffs) {
            logp += self.coef_prior.logpdf(c);
            *g += self.coef_prior.dlogpdf(c);
        }
        if let Some(sigma_prior) = &self.sigma_prior {
            // log-sigma parameterization: prior + Jacobian term.
            logp += sigma_prior.logpdf(sigma) + sigma.ln();
            grad[k] = (sq_sum * inv_var - n as f64) + sigma_prior.dlogpdf(sigma) * sigma + 1.0;
        }
        logp
    }
}

impl TargetDensity for SurrogateTarget {
    fn dim(&self) -> usize {
        self.n_coefficients + usize::from(self.sigma_prior.is_some())
    }

    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.n_coefficients;
        let sigma = if self.sigma_prior.is_some() {
            position[k].exp()
        } else {
            self.fixed_sigma
        };
        self.value_grad(&position[..k], sigma, grad)
    }
}

fn build_design(
    data: &SurrogateTrainingSet,
    basis: &BasisSpec,
    index_set: &MultiIndexSet,
) -> Result<Vec<Vec<f64>>, SurrogateError> {
    data.rows
        .iter()
        .map(|row| basis_eval(basis, index_set, &row.point()).map_err(SurrogateError::from))
        .collect()
}

/// Log posterior density and gradient of the surrogate target at
/// `(c, sigma)`, with the gradient taken in `(c, log sigma)` including
/// the Jacobian term.
pub fn surrogate_log_posterior(
    coeffs: &[f64],
    sigma: f64,
    data: &SurrogateTrainingSet,
    basis: &BasisSpec,
    index_set: &MultiIndexSet,
    prior: &SurrogatePrior,
) -> Result<(f64, Vec<f64>), SurrogateError> {
    if sigma <= 0.0 {
        return Err(SurrogateError::SigmaDomain(sigma));
    }
    let target = SurrogateTarget::new(data, basis, index_set, prior)?;
    let mut grad = vec![0.0; coeffs.len() + 1];
    let logp = target.value_grad(coeffs, sigma, &mut grad);
    Ok((logp, grad))
}

/// Condition number of the design matrix (ratio of singular values),
/// used to warn about degenerate designs before fitting.
pub fn design_condition(design: &[Vec<f64>]) -> f64 {
    if design.is_empty() {
        return 1.0;
    }
    let k = design[0].len();
    let mut gram = vec![vec![0.0; k]; k];
    for row in design {
        for i in 0..k {
            for j in 0..k {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    let eigs = symmetric_eigenvalues(&mut gram);
    let max = eigs.iter().cloned().fold(f64::MIN, f64::max);
    let min = eigs.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        (max / min).sqrt()
    }
}

/// Jacobi eigenvalue iteration for small symmetric matrices.
fn symmetric_eigenvalues(a: &mut [Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let mut off = 0.0;
        let (mut p, mut q) = (0, 1);
        for i in 0..n {
            for j in i + 1..n {
                if a[i][j].abs() > off {
                    off = a[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for i in 0..n {
            let (aip, aiq) = (a[i][p], a[i][q]);
            a[i][p] = c * aip - s * aiq;
            a[i][q] = s * aip + c * aiq;
        }
        for i in 0..n {
            let (api, aqi) = (a[p][i], a[q][i]);
            a[p][i] = c * api - s * aqi;
            a[q][i] = s * api + c * aqi;
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Fits the joint posterior over (c, sigma) by HMC on the
/// `(c, log sigma)` scale. Fails when any coordinate has R-hat >= 1.01
/// unless `allow_unconverged` is set.
pub fn fit_surrogate(
    data: &SurrogateTrainingSet,
    basis: &BasisSpec,
    index_set: &MultiIndexSet,
    prior: &SurrogatePrior,
    mcmc: &McmcConfig,
    allow_unconverged: bool,
) -> Result<SurrogatePosterior, SurrogateError> {
    let target = SurrogateTarget::new(data, basis, index_set, prior)?;
    let condition = design_condition(&target.design);
    if condition > 1e8 && !data.is_empty() {
        eprintln!("warning: design matrix condition number {condition:.3e} exceeds 1e8");
    }
    let out = hmc_sample(&target, mcmc)?;
    check_convergence(&out.rhat, allow_unconverged)?;
    let k = index_set.len();
    let draws = out
        .draws
        .iter()
        .flatten()
        .map(|d| {
            let mut row = d[..k].to_vec();
            row.push(d[k].exp());
            row
        })
        .collect();
    Ok(SurrogatePosterior {
        basis: basis.clone(),
        index_set: index_set.clone(),
        draws,
        provenance: SurrogateProvenance {
            seed: mcmc.seed,
            mcmc: *mcmc,
            training_digest: data.digest(),
            rhat: out.rhat,
            ess: out.ess,
            design_condition: condition,
            accept_rate: out.accept_rate,
        },
    })
}

/// Variant with sigma held fixed (point-mass error-scale prior). The
/// coefficient posterior is then conjugate Gaussian, which the tests
/// exploit as a closed-form oracle.
pub fn fit_surrogate_fixed_sigma(
    data: &SurrogateTrainingSet,
    basis: &BasisSpec,
    index_set: &MultiIndexSet,
    coef_prior: DistributionSpec,
    sigma: f64,
    mcmc: &McmcConfig,
    allow_unconverged: bool,
) -> Result<SurrogatePosterior, SurrogateError> {
    let target = SurrogateTarget::with_fixed_sigma(data, basis, index_set, coef_prior, sigma)?;
    let condition = design_condition(&target.design);
    let out = hmc_sample(&target, mcmc)?;
    check_convergence(&out.rhat, allow_unconverged)?;
    let draws = out
        .draws
        .iter()
        .flatten()
        .map(|d| {
            let mut row = d.clone();
            row.push(sigma);
            row
        })
        .collect();
    Ok(SurrogatePosterior {
        basis: basis.clone(),
        index_set: index_set.clone(),
        draws,
        provenance: SurrogateProvenance {
            seed: mcmc.seed,
            mcmc: *mcmc,
            training_digest: data.digest(),
            rhat: out.rhat,
            ess: out.ess,
            design_condition: condition,
            accept_rate: out.accept_rate,
        },
    })
}

fn check_convergence(rhat: &[f64], allow_unconverged: bool) -> Result<(), SurrogateError> {
    let coords: Vec<usize> = rhat
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_finite() || **r >= 1.01)
        .map(|(i, _)| i)
        .collect();
    if coords.is_empty() || allow_unconverged {
        Ok(())
    } else {
        let worst = coords.iter().map(|&i| rhat[i]).fold(f64::MIN, f64::max);
        Err(SurrogateError::Unconverged { rhat: worst, coords })
    }
}

/// Coordinate-wise posterior median of the coefficients; sigma is
/// discarded.
pub fn point_surrogate(posterior: &SurrogatePosterior) -> Result<PceModel, SurrogateError> {
    if posterior.draws.is_empty() {
        return Err(SurrogateError::EmptyPosterior);
    }
    let k = posterior.n_coefficients();
    let coefficients = (0..k)
        .map(|j| median(posterior.draws.iter().map(|d| d[j]).collect()))
        .collect();
    Ok(PceModel::new(
        posterior.basis.clone(),
        posterior.index_set.clone(),
        coefficients,
    )?)
}

pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Error-adjusted surrogate output: the PCE prediction for one posterior
/// draw plus Gaussian noise at that draw's sigma.
pub fn sample_error_adjusted(
    coeffs: &[f64],
    sigma: f64,
    posterior: &SurrogatePosterior,
    inputs: &[f64],
    params: &[f64],
    rng: &mut RngStream,
) -> Result<f64, SurrogateError> {
    let mut point = inputs.to_vec();
    point.extend_from_slice(params);
    let vals = basis_eval(&posterior.basis, &posterior.index_set, &point)?;
    let pred: f64 = vals.iter().zip(coeffs).map(|(p, c)| p * c).sum();
    let z: f64 = StandardNormal.sample(rng);
    Ok(pred + sigma * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{scale_to_box, sobol_points};
    use crate::polychaos::{pce_predict, truncation_indices, Basis1d};
    use rand::Rng;

    const LN_2PI: f64 = 1.8378770664093453;

    fn unit_basis(dim: usize, degree: usize) -> (BasisSpec, MultiIndexSet) {
        (
            BasisSpec {
                dims: vec![Basis1d::LegendreOnBox { lo: -1.0, hi: 1.0 }; dim],
            },
            truncation_indices(dim, degree),
        )
    }

    fn default_prior() -> SurrogatePrior {
        SurrogatePrior::new(
            DistributionSpec::normal(0.0, 5.0).unwrap(),
            DistributionSpec::half_normal(0.5).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn sigma_prior_must_be_positive_support() {
        let bad = SurrogatePrior::new(
            DistributionSpec::normal(0.0, 5.0).unwrap(),
            DistributionSpec::normal(0.0, 1.0).unwrap(),
        );
        assert!(matches!(bad, Err(SurrogateError::InvalidSigmaPrior(_))));
    }

    #[test]
    fn zero_residual_likelihood_anchor() {
        let (basis, set) = unit_basis(2, 2);
        let k = set.len();
        let mut rng = RngStream::new(3, 0);
        let coeffs: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = PceModel::new(basis.clone(), set.clone(), coeffs.clone()).unwrap();
        let rows: Vec<TrainingRow> = (0..8)
            .map(|_| {
                let x = rng.gen_range(-1.0..1.0);
                let w = rng.gen_range(-1.0..1.0);
                TrainingRow {
                    inputs: vec![x],
                    params: vec![w],
                    output: pce_predict(&model, &[x, w]).unwrap(),
                }
            })
            .collect();
        let data = SurrogateTrainingSet::new(rows).unwrap();
        let prior = default_prior();
        let (logp, _) =
            surrogate_log_posterior(&coeffs, 1.0, &data, &basis, &set, &prior).unwrap();
        let expected_likelihood = -8.0 * 0.5 * LN_2PI;
        let prior_part: f64 = coeffs.iter().map(|&c| prior.coef.logpdf(c)).sum::<f64>()
            + prior.sigma.logpdf(1.0);
        assert!((logp - (expected_likelihood + prior_part)).abs() < 1e-9);
    }

    #[test]
    fn single_zero_residual_anchor() {
        let (basis, set) = unit_basis(1, 1);
        let data = SurrogateTrainingSet::new(vec![TrainingRow {
            inputs: vec![0.3],
            params: vec![],
            output: 0.0,
        }])
        .unwrap();
        let prior = default_prior();
        let sigma = 0.7;
        let coeffs = vec![0.0; set.len()];
        let (logp, _) =
            surrogate_log_posterior(&coeffs, sigma, &data, &basis, &set, &prior).unwrap();
        let expected_likelihood = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let prior_part: f64 = coeffs.iter().map(|&c| prior.coef.logpdf(c)).sum::<f64>()
            + prior.sigma.logpdf(sigma)
            + sigma.ln();
        assert!((logp - (expected_likelihood + prior_part)).abs() < 1e-9);
    }

    #[test]
    fn sigma_domain_error() {
        let (basis, set) = unit_basis(1, 1);
        let data = SurrogateTrainingSet::new(vec![]).unwrap();
        let err =
            surrogate_log_posterior(&[0.0, 0.0], -1.0, &data, &basis, &set, &default_prior());
        assert!(matches!(err, Err(SurrogateError::SigmaDomain(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (basis, set) = unit_basis(2, 2);
        let k = set.len();
        let mut rng = RngStream::new(5, 0);
        let rows: Vec<TrainingRow> = (0..12)
            .map(|_| TrainingRow {
                inputs: vec![rng.gen_range(-1.0..1.0)],
                params: vec![rng.gen_range(-1.0..1.0)],
                output: rng.gen_range(-2.0..2.0),
            })
            .collect();
        let data = SurrogateTrainingSet::new(rows).unwrap();
        let prior = default_prior();
        let target = SurrogateTarget::new(&data, &basis, &set, &prior).unwrap();
        for _ in 0..20 {
            let pos: Vec<f64> = (0..k + 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut grad = vec![0.0; k + 1];
            target.log_density_grad(&pos, &mut grad);
            for j in 0..k + 1 {
                let h = 1e-5;
                let mut hi = pos.clone();
                let mut lo = pos.clone();
                hi[j] += h;
                lo[j] -= h;
                let mut tmp = vec![0.0; k + 1];
                let fd = (target.log_density_grad(&hi, &mut tmp)
                    - target.log_density_grad(&lo, &mut tmp))
                    / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "coord {j}: fd={fd} grad={}",
                    grad[j]
                );
            }
        }
    }

    /// Closed-form conjugate Gaussian posterior for fixed sigma and a
    /// N(0, tau) coefficient prior: solves
    /// (Psi'Psi/sigma^2 + I/tau^2) mean = Psi'y/sigma^2.
    fn conjugate_posterior(
        design: &[Vec<f64>],
        y: &[f64],
        sigma: f64,
        tau: f64,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let k = design[0].len();
        let mut a = vec![vec![0.0; k]; k];
        let mut b = vec![0.0; k];
        for (row, &yi) in design.iter().zip(y) {
            for i in 0..k {
                b[i] += row[i] * yi / (sigma * sigma);
                for j in 0..k {
                    a[i][j] += row[i] * row[j] / (sigma * sigma);
                }
            }
        }
        for i in 0..k {
            a[i][i] += 1.0 / (tau * tau);
        }
        // Invert A by Gauss-Jordan to get the covariance, then mean.
        let mut aug: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..k).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..k {
            let pivot = (col..k)
                .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for r in 0..k {
                if r != col {
                    let f = aug[r][col];
                    for c2 in 0..2 * k {
                        aug[r][c2] -= f * aug[col][c2];
                    }
                }
            }
        }
        let cov: Vec<Vec<f64>> = aug.iter().map(|r| r[k..].to_vec()).collect();
        let mean: Vec<f64> = (0..k)
            .map(|i| (0..k).map(|j| cov[i][j] * b[j]).sum())
            .collect();
        (mean, cov)
    }

    #[test]
    fn fixed_sigma_matches_conjugate_gaussian() {
        let (basis, set) = unit_basis(2, 2);
        let k = set.len();
        let mut rng = RngStream::new(6, 0);
        let truth: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = PceModel::new(basis.clone(), set.clone(), truth).unwrap();
        let sigma = 0.3;
        let rows: Vec<TrainingRow> = (0..32)
            .map(|_| {
                let x = rng.gen_range(-1.0..1.0);
                let w = rng.gen_range(-1.0..1.0);
                let noise: f64 = StandardNormal.sample(&mut rng);
                TrainingRow {
                    inputs: vec![x],
                    params: vec![w],
                    output: pce_predict(&model, &[x, w]).unwrap() + sigma * noise,
                }
            })
            .collect();
        let data = SurrogateTrainingSet::new(rows).unwrap();
        let tau = 5.0;
        let coef_prior = DistributionSpec::normal(0.0, tau).unwrap();
        let mcmc = McmcConfig {
            seed: 61,
            ..Default::default()
        };
        let posterior =
            fit_surrogate_fixed_sigma(&data, &basis, &set, coef_prior, sigma, &mcmc, false)
                .unwrap();

        let design: Vec<Vec<f64>> = data
            .rows
            .iter()
            .map(|r| basis_eval(&basis, &set, &r.point()).unwrap())
            .collect();
        let y: Vec<f64> = data.rows.iter().map(|r| r.output).collect();
        let (mean, cov) = conjugate_posterior(&design, &y, sigma, tau);

        let n_draws = posterior.n_draws() as f64;
        for j in 0..k {
            let vals: Vec<f64> = posterior.draws.iter().map(|d| d[j]).collect();
            let m = vals.iter().sum::<f64>() / n_draws;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_draws - 1.0)).sqrt();
            let ess = posterior.provenance.ess[j].max(10.0);
            let se = cov[j][j].sqrt() / ess.sqrt();
            assert!(
                (m - mean[j]).abs() < 3.0 * se.max(1e-6),
                "coef {j}: hmc mean {m} vs conjugate {} (se {se})",
                mean[j]
            );
            let ratio = sd / cov[j][j].sqrt();
            assert!(
                (0.9..=1.1).contains(&ratio),
                "coef {j}: sd ratio {ratio}"
            );
        }
    }

    #[test]
    fn fit_recovers_synthetic_polynomial() {
        let (basis, set) = unit_basis(2, 3);
        let k = set.len();
        let mut rng = RngStream::new(7, 0);
        let truth: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = PceModel::new(basis.clone(), set.clone(), truth.clone()).unwrap();
        let rows: Vec<TrainingRow> = (0..64)
            .map(|_| {
                let x = rng.gen_range(-1.0..1.0);
                let w = rng.gen_range(-1.0..1.0);
                let noise: f64 = StandardNormal.sample(&mut rng);
                TrainingRow {
                    inputs: vec![x],
                    params: vec![w],
                    output: pce_predict(&model, &[x, w]).unwrap() + 0.1 * noise,
                }
            })
            .collect();
        let data = SurrogateTrainingSet::new(rows).unwrap();
        let mcmc = McmcConfig {
            seed: 71,
            ..Default::default()
        };
        let posterior =
            fit_surrogate(&data, &basis, &set, &default_prior(), &mcmc, false).unwrap();
        assert_eq!(posterior.n_draws(), 4000);
        let n = posterior.n_draws() as f64;
        for j in 0..k {
            let vals: Vec<f64> = posterior.draws.iter().map(|d| d[j]).collect();
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(
                (m - truth[j]).abs() < 4.0 * sd,
                "coef {j}: mean {m}, truth {}, sd {sd}",
                truth[j]
            );
        }
        // sigma concentrates near the injected noise scale.
        let sig_draws: Vec<f64> = (0..posterior.n_draws()).map(|i| posterior.sigma(i)).collect();
        let med = median(sig_draws);
        assert!((0.05..0.2).contains(&med), "sigma median {med}");
    }

    #[test]
    fn logsin_design_sigma_bounded_away_from_zero() {
        // 16-point Sobol design on [1,200] x [0.6,1.4]: a cubic cannot
        // match the log + sine shape, so the error scale must stay
        // positive.
        let pts = scale_to_box(
            &sobol_points(2, 16, true).unwrap(),
            &[(1.0, 200.0), (0.6, 1.4)],
        )
        .unwrap();
        let rows: Vec<TrainingRow> = pts
            .iter()
            .map(|p| TrainingRow {
                inputs: vec![p[0]],
                params: vec![p[1]],
                output: p[1] * p[0].ln() + (0.05 * p[0]).sin() + 0.01 * p[0] + 1.0,
            })
            .collect();
        let data = SurrogateTrainingSet::new(rows).unwrap();
        let basis = BasisSpec {
            dims: vec![
                Basis1d::LegendreOnBox { lo: 1.0, hi: 200.0 },
                Basis1d::LegendreOnBox { lo: 0.6, hi: 1.4 },
            ],
        };
        let set = truncation_indices(2, 3);
        // Only 6 residual degrees of freedom, so the error-scale
        // posterior is heavy-tailed and needs longer adaptation to mix.
        let mcmc = McmcConfig {
            n_warmup: 2000,
            n_draws: 250,
            seed: 72,
            ..Default::default()
        };
        let posterior = fit_surrogate(&data, &basis, &set, &default_prior(), &mcmc, false).unwrap();
        assert_eq!(posterior.n_draws(), 1000);
        let mut sig: Vec<f64> = (0..posterior.n_draws()).map(|i| posterior.sigma(i)).collect();
        sig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p5 = sig[posterior.n_draws() / 20];
        assert!(p5 > 0.0, "5th percentile of sigma is {p5}");
    }

    #[test]
    fn prior_recovery_with_no_data() {
        let (basis, set) = unit_basis(1, 1);
        let data = SurrogateTrainingSet::new(vec![]).unwrap();
        let prior = default_prior();
        let mcmc = McmcConfig {
            seed: 73,
            ..Default::default()
        };
        let posterior = fit_surrogate(&data, &basis, &set, &prior, &mcmc, false).unwrap();
        let n = posterior.n_draws() as f64;
        for j in 0..set.len() {
            let m: f64 = posterior.draws.iter().map(|d| d[j]).sum::<f64>() / n;
            let sd = (posterior.draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 0.5, "coef {j} prior mean {m}");
            assert!((sd - 5.0).abs() < 0.6, "coef {j} prior sd {sd}");
        }
        let sig_mean: f64 = (0..posterior.n_draws())
            .map(|i| posterior.sigma(i))
            .sum::<f64>()
            / n;
        let expected = prior.sigma.mean();
        assert!((sig_mean - expected).abs() < 0.1, "sigma mean {sig_mean} vs {expected}");
    }

    #[test]
    fn point_surrogate_medians() {
        let (basis, set) = unit_basis(1, 0);
        let mk = |draws: Vec<Vec<f64>>| SurrogatePosterior {
            basis: basis.clone(),
            index_set: set.clone(),
            draws,
            provenance: SurrogateProvenance {
                seed: 0,
                mcmc: McmcConfig::default(),
                training_digest: String::new(),
                rhat: vec![],
                ess: vec![],
                design_condition: 1.0,
                accept_rate: vec![],
            },
        };
        let odd = mk(vec![vec![1.0, 0.1], vec![2.0, 0.1], vec![3.0, 0.1]]);
        assert_eq!(point_surrogate(&odd).unwrap().coefficients, vec![2.0]);
        let even = mk(vec![
            vec![1.0, 0.1],
            vec![2.0, 0.1],
            vec![3.0, 0.1],
            vec![4.0, 0.1],
        ]);
        assert_eq!(point_surrogate(&even).unwrap().coefficients, vec![2.5]);
        let empty = mk(vec![]);
        assert!(matches!(
            point_surrogate(&empty),
            Err(SurrogateError::EmptyPosterior)
        ));
    }

    #[test]
    fn error_adjusted_sampling_moments() {
        let (basis, set) = unit_basis(2, 1);
        let k = set.len();
        let coeffs = vec![1.5, -0.3, 0.8][..k.min(3)].to_vec();
        let mut c = vec![0.0; k];
        c[..coeffs.len()].copy_from_slice(&coeffs);
        let posterior = SurrogatePosterior {
            basis: basis.clone(),
            index_set: set.clone(),
            draws: vec![{
                let mut d = c.clone();
                d.push(0.4);
                d
            }],
            provenance: SurrogateProvenance {
                seed: 0,
                mcmc: McmcConfig::default(),
                training_digest: String::new(),
                rhat: vec![],
                ess: vec![],
                design_condition: 1.0,
                accept_rate: vec![],
            },
        };
        let model = PceModel::new(basis, set, c.clone()).unwrap();
        let x = [0.3];
        let w = [-0.4];
        let expect = pce_predict(&model, &[0.3, -0.4]).unwrap();

        // Degenerate noise reduces to the point prediction.
        let mut rng = RngStream::new(8, 0);
        let v = sample_error_adjusted(&c, 1e-12, &posterior, &x, &w, &mut rng).unwrap();
        assert!((v - expect).abs() < 1e-9);

        // Gaussian moments at sigma = 0.4.
        let n = 100_000;
        let mut rng = RngStream::new(8, 1);
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_error_adjusted(&c, 0.4, &posterior, &x, &w, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * 0.4 / (n as f64).sqrt());
        assert!((sd - 0.4).abs() < 0.02 * 0.4, "sd {sd}");

        // Two different streams: different values, same distribution.
        let mut r1 = RngStream::new(8, 2);
        let mut r2 = RngStream::new(8, 3);
        let m = 10_000;
        let mut a: Vec<f64> = (0..m)
            .map(|_| sample_error_adjusted(&c, 0.4, &posterior, &x, &w, &mut r1).unwrap())
            .collect();
        let mut b: Vec<f64> = (0..m)
            .map(|_| sample_error_adjusted(&c, 0.4, &posterior, &x, &w, &mut r2).unwrap())
            .collect();
        assert_ne!(a[0], b[0]);
        a.sort_by(|p, q| p.partial_cmp(q).unwrap());
        b.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let ks = two_sample_ks(&a, &b);
        let crit = 1.9495 * ((2.0 * m as f64) / (m as f64 * m as f64)).sqrt();
        assert!(ks < crit, "KS {ks} >= {crit}");
    }

    fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
        let (mut i, mut j) = (0usize, 0usize);
        let mut d: f64 = 0.0;
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn posterior_predictive_matches_explicit_mixture() {
        // Small two-draw posterior: sampling a draw then the error model
        // must match explicit mixture sampling.
        let (basis, set) = unit_basis(1, 0);
        let posterior = SurrogatePosterior {
            basis,
            index_set: set,
            draws: vec![vec![-1.0, 0.2], vec![2.0, 0.5]],
            provenance: SurrogateProvenance {
                seed: 0,
                mcmc: McmcConfig::default(),
                training_digest: String::new(),
                rhat: vec![],
                ess: vec![],
                design_condition: 1.0,
                accept_rate: vec![],
            },
        };
        let n = 50_000;
        let mut rng = RngStream::new(9, 0);
        let mut via_posterior: Vec<f64> = (0..n)
            .map(|_| {
                let i = rng.gen_range(0..posterior.n_draws());
                let c = posterior.coefficients(i).to_vec();
                let s = posterior.sigma(i);
                sample_error_adjusted(&c, s, &posterior, &[0.0], &[], &mut rng).unwrap()
            })
            .collect();
        let mut rng = RngStream::new(9, 1);
        let mut explicit: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if rng.gen_bool(0.5) {
                    -1.0 + 0.2 * z
                } else {
                    2.0 + 0.5 * z
                }
            })
            .collect();
        via_posterior.sort_by(|p, q| p.partial_cmp(q).unwrap());
        explicit.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let ks = two_sample_ks(&via_posterior, &explicit);
        let crit = 1.9495 * ((2.0 * n as f64) / (n as f64 * n as f64)).sqrt();
        assert!(ks < crit, "KS {ks} >= {crit}");
    }
}
