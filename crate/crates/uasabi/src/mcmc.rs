//! Gradient-based Hamiltonian Monte Carlo with warmup adaptation, plus
//! rank-normalized convergence diagnostics.
//!
//! Plain HMC with a jittered leapfrog path length: targets here are
//! low-dimensional and smooth, and dual averaging plus a diagonal mass
//! matrix is enough to hit the configured acceptance rate. Constrained
//! coordinates are the caller's job (log-transform with the Jacobian
//! term folded into the target).

use crate::numerics::{normal_quantile, RngStream};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("failed to find a finite initial point after {0} attempts")]
    InitializationFailure(usize),
    #[error("diagnostic requires at least 2 chains, got {0}")]
    InsufficientChains(usize),
    #[error("diagnostic requires at least 4 iterations per chain, got {0}")]
    InsufficientDraws(usize),
}

/// An unnormalized log density with gradient, on an unconstrained scale.
pub trait TargetDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density at `position`; the gradient is written into `grad`
    /// (same length as `position`).
    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    /// Chain starting point on the unconstrained scale. The default is
    /// uniform over (-2, 2) per coordinate; targets whose density has
    /// spurious far-out modes should override this to start inside the
    /// bulk of their reference measure.
    fn initial_position(&self, rng: &mut RngStream, out: &mut [f64]) {
        for p in out.iter_mut() {
            *p = rng.gen_range(-2.0..2.0);
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
    /// Leapfrog path length upper bound; each iteration draws the step
    /// count uniformly from `1..=leapfrog_steps`.
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_draws: 1000,
            leapfrog_steps: 16,
            target_accept: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainOutput {
    /// `draws[chain][iteration][coordinate]`.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub accept_rate: Vec<f64>,
    pub step_size: Vec<f64>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub divergence_rate: f64,
    /// Set when more than 10% of post-warmup transitions diverged.
    pub divergence_warning: bool,
}

impl ChainOutput {
    /// All chains concatenated: one row per draw.
    pub fn pooled(&self) -> Vec<Vec<f64>> {
        self.draws.iter().flatten().cloned().collect()
    }

    /// Draws of one coordinate, shaped `[chain][iteration]`.
    pub fn coordinate(&self, k: usize) -> Vec<Vec<f64>> {
        self.draws
            .iter()
            .map(|chain| chain.iter().map(|d| d[k]).collect())
            .collect()
    }
}

/// Runs `config.n_chains` independent HMC chains and assembles
/// diagnostics. Chains execute in parallel; each owns a derived stream,
/// so output does not depend on scheduling.
pub fn hmc_sample(target: &dyn TargetDensity, config: &McmcConfig) -> Result<ChainOutput, McmcError> {
    let root = RngStream::new(config.seed, 0x484d_43);
    let chains: Result<Vec<ChainResult>, McmcError> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, config, root.substream(c as u64)))
        .collect();
    let chains = chains?;

    let dim = target.dim();
    let draws: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.draws.clone()).collect();
    let mut rhat_vec = Vec::with_capacity(dim);
    let mut ess_vec = Vec::with_capacity(dim);
    let per_coord = |k: usize| -> Vec<Vec<f64>> {
        draws
            .iter()
            .map(|chain| chain.iter().map(|d| d[k]).collect())
            .collect()
    };
    for k in 0..dim {
        let coord = per_coord(k);
        if config.n_chains >= 2 && config.n_draws >= 4 {
            rhat_vec.push(rhat(&coord)?);
            ess_vec.push(ess(&coord)?);
        } else {
            rhat_vec.push(f64::NAN);
            ess_vec.push(f64::NAN);
        }
    }
    let total: usize = chains.iter().map(|c| c.transitions).sum();
    let divergent: usize = chains.iter().map(|c| c.divergences).sum();
    let divergence_rate = divergent as f64 / total.max(1) as f64;
    Ok(ChainOutput {
        draws,
        accept_rate: chains.iter().map(|c| c.accept_rate).collect(),
        step_size: chains.iter().map(|c| c.step_size).collect(),
        rhat: rhat_vec,
        ess: ess_vec,
        divergence_rate,
        divergence_warning: divergence_rate > 0.10,
    })
}

struct ChainResult {
    draws: Vec<Vec<f64>>,
    accept_rate: f64,
    step_size: f64,
    transitions: usize,
    divergences: usize,
}

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    target: f64,
}

// Standard dual-averaging constants.
const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

impl DualAveraging {
    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            h_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept_prob: f64) {
        self.m += 1.0;
        let eta = 1.0 / (self.m + DA_T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        self.log_eps = self.mu - self.m.sqrt() / DA_GAMMA * self.h_bar;
        let w = self.m.powf(-DA_KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }
}

fn run_chain(
    target: &dyn TargetDensity,
    config: &McmcConfig,
    mut rng: RngStream,
) -> Result<ChainResult, McmcError> {
    let dim = target.dim();
    let mut grad = vec![0.0; dim];

    // Initialization: retry the target's starting distribution until
    // the density and gradient are finite.
    let mut pos = vec![0.0; dim];
    let mut logp = f64::NEG_INFINITY;
    let mut found = false;
    for _ in 0..100 {
        target.initial_position(&mut rng, &mut pos);
        logp = target.log_density_grad(&pos, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            found = true;
            break;
        }
    }
    if !found {
        return Err(McmcError::InitializationFailure(100));
    }

    let mut inv_mass = vec![1.0; dim];
    let mut eps = initial_step_size(target, &pos, logp, &inv_mass, &mut rng);

    let warmup = config.n_warmup;
    let stage1_end = warmup / 2;
    let mut da = DualAveraging::new(eps, config.target_accept);
    let mut variance_window: Vec<Vec<f64>> = Vec::new();

    for m in 0..warmup {
        let (new_pos, new_logp, accept_prob, _) = transition(
            target, &pos, logp, eps, config.leapfrog_steps, &inv_mass, &mut rng, &mut grad,
        );
        pos = new_pos;
        logp = new_logp;
        da.update(accept_prob);
        eps = da.log_eps.exp();

        if warmup >= 40 {
            if m >= stage1_end / 2 && m < stage1_end {
                variance_window.push(pos.clone());
            }
            if m + 1 == stage1_end && !variance_window.is_empty() {
                // Switch to the estimated diagonal mass matrix and
                // restart step-size adaptation around the current eps.
                inv_mass = regularized_variance(&variance_window);
                da = DualAveraging::new(eps, config.target_accept);
            }
        }
    }
    if warmup > 0 {
        eps = da.log_eps_bar.exp();
    }

    let mut draws = Vec::with_capacity(config.n_draws);
    let mut accepts = 0.0;
    let mut divergences = 0;
    for _ in 0..config.n_draws {
        let (new_pos, new_logp, accept_prob, divergent) = transition(
            target, &pos, logp, eps, config.leapfrog_steps, &inv_mass, &mut rng, &mut grad,
        );
        pos = new_pos;
        logp = new_logp;
        accepts += accept_prob;
        divergences += usize::from(divergent);
        draws.push(pos.clone());
    }
    Ok(ChainResult {
        draws,
        accept_rate: accepts / config.n_draws as f64,
        step_size: eps,
        transitions: config.n_draws,
        divergences,
    })
}

/// Doubling/halving heuristic: find a step size whose one-step
/// acceptance straddles 0.5.
fn initial_step_size(
    target: &dyn TargetDensity,
    pos: &[f64],
    logp: f64,
    inv_mass: &[f64],
    rng: &mut RngStream,
) -> f64 {
    let dim = pos.len();
    let mut grad = vec![0.0; dim];
    target.log_density_grad(pos, &mut grad);
    let mut eps = 1.0;
    let mut momentum = vec![0.0; dim];
    for (p, im) in momentum.iter_mut().zip(inv_mass) {
        let z: f64 = StandardNormal.sample(rng);
        *p = z / im.sqrt();
    }
    let h0 = hamiltonian(logp, &momentum, inv_mass);
    let log_ratio = |eps: f64| -> f64 {
        let mut q = pos.to_vec();
        let mut p = momentum.clone();
        let mut g = grad.clone();
        let lp = leapfrog(target, &mut q, &mut p, &mut g, eps, 1, inv_mass);
        let h1 = hamiltonian(lp, &p, inv_mass);
        h1 - h0
    };
    let mut ratio = log_ratio(eps);
    if !ratio.is_finite() {
        ratio = f64::NEG_INFINITY;
    }
    let direction: f64 = if ratio > (0.5f64).ln() { 1.0 } else { -1.0 };
    for _ in 0..50 {
        let r = log_ratio(eps);
        let r = if r.is_finite() { r } else { f64::NEG_INFINITY };
        if direction * r <= direction * (0.5f64).ln() {
            break;
        }
        eps *= (2.0f64).powf(direction);
    }
    eps.clamp(1e-10, 1e2)
}

fn hamiltonian(logp: f64, momentum: &[f64], inv_mass: &[f64]) -> f64 {
    let kinetic: f64 = momentum
        .iter()
        .zip(inv_mass)
        .map(|(p, im)| 0.5 * im * p * p)
        .sum();
    logp - kinetic
}

fn leapfrog(
    target: &dyn TargetDensity,
    pos: &mut [f64],
    momentum: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    steps: usize,
    inv_mass: &[f64],
) -> f64 {
    let mut logp = 0.0;
    for p in momentum.iter_mut().zip(grad.iter()) {
        *p.0 += 0.5 * eps * p.1;
    }
    for step in 0..steps {
        for ((q, p), im) in pos.iter_mut().zip(momentum.iter()).zip(inv_mass) {
            *q += eps * im * p;
        }
        logp = target.log_density_grad(pos, grad);
        let half = if step + 1 == steps { 0.5 } else { 1.0 };
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += half * eps * g;
        }
        if !logp.is_finite() {
            return f64::NEG_INFINITY;
        }
    }
    logp
}

#[allow(clippy::too_many_arguments)]
fn transition(
    target: &dyn TargetDensity,
    pos: &[f64],
    logp: f64,
    eps: f64,
    max_steps: usize,
    inv_mass: &[f64],
    rng: &mut RngStream,
    grad: &mut [f64],
) -> (Vec<f64>, f64, f64, bool) {
    let dim = pos.len();
    let steps = rng.gen_range(1..=max_steps.max(1));
    let mut momentum = vec![0.0; dim];
    for (p, im) in momentum.iter_mut().zip(inv_mass) {
        let z: f64 = StandardNormal.sample(rng);
        *p = z / im.sqrt();
    }
    let h0 = hamiltonian(logp, &momentum, inv_mass);
    let mut q = pos.to_vec();
    target.log_density_grad(&q, grad);
    let new_logp = leapfrog(target, &mut q, &mut momentum, grad, eps, steps, inv_mass);
    let h1 = hamiltonian(new_logp, &momentum, inv_mass);
    let delta = h1 - h0;
    let divergent = !delta.is_finite() || delta < -1000.0;
    let accept_prob = if divergent { 0.0 } else { delta.exp().min(1.0) };
    let u: f64 = rng.gen();
    if !divergent && u < accept_prob {
        (q, new_logp, accept_prob, divergent)
    } else {
        (pos.to_vec(), logp, accept_prob, divergent)
    }
}

fn regularized_variance(window: &[Vec<f64>]) -> Vec<f64> {
    let n = window.len() as f64;
    let dim = window[0].len();
    let mut var = vec![0.0; dim];
    for k in 0..dim {
        let mean: f64 = window.iter().map(|w| w[k]).sum::<f64>() / n;
        let v: f64 = window.iter().map(|w| (w[k] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        // Shrink toward unit scale, as a crude guard against a short window.
        var[k] = (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0));
    }
    var
}

/// Pooled average ranks mapped through the normal quantile function
/// (ties get the average rank).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat_index = 0usize;
    for chain in chains {
        for &v in chain {
            indexed.push((v, flat_index));
            flat_index += 1;
        }
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in indexed.iter().take(j + 1).skip(i) {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let s = total as f64;
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0;
    for chain in chains {
        let mut z = Vec::with_capacity(chain.len());
        for _ in chain {
            z.push(normal_quantile((ranks[k] - 0.375) / (s + 0.25)));
            k += 1;
        }
        out.push(z);
    }
    out
}

/// Halve each chain; chains too short to leave 4 draws per half are
/// kept whole so the diagnostics stay defined on tiny inputs.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let min_len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if min_len < 8 {
        return chains.to_vec();
    }
    let mut out = Vec::with_capacity(chains.len() * 2);
    for chain in chains {
        let half = chain.len() / 2;
        out.push(chain[..half].to_vec());
        out.push(chain[half..half * 2].to_vec());
    }
    out
}

/// Rank-normalized split-R̂ over `draws[chain][iteration]`.
pub fn rhat(draws: &[Vec<f64>]) -> Result<f64, McmcError> {
    validate_diagnostic_input(draws)?;
    let z = rank_normalize(&split_chains(draws));
    let m = z.len() as f64;
    let n = z[0].len() as f64;
    let chain_means: Vec<f64> = z.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = chain_means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * chain_means.iter().map(|cm| (cm - grand).powi(2)).sum::<f64>();
    let w = z
        .iter()
        .zip(&chain_means)
        .map(|(c, cm)| c.iter().map(|v| (v - cm).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return Ok(if b <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Bulk effective sample size with Geyer initial-monotone truncation,
/// computed on rank-normalized split chains. Returns 0 for a
/// zero-variance input.
pub fn ess(draws: &[Vec<f64>]) -> Result<f64, McmcError> {
    validate_diagnostic_input(draws)?;
    let z = rank_normalize(&split_chains(draws));
    let m = z.len();
    let n = z[0].len();
    let chain_means: Vec<f64> = z.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let chain_vars: Vec<f64> = z
        .iter()
        .zip(&chain_means)
        .map(|(c, cm)| c.iter().map(|v| (v - cm).powi(2)).sum::<f64>() / (n - 1) as f64)
        .collect();
    let w: f64 = chain_vars.iter().sum::<f64>() / m as f64;
    let grand = chain_means.iter().sum::<f64>() / m as f64;
    let b_over_n = if m > 1 {
        chain_means.iter().map(|cm| (cm - grand).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let var_plus = (n - 1) as f64 / n as f64 * w + b_over_n;
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return Ok(0.0);
    }

    // Mean autocovariance across chains at each lag (biased estimator).
    let acov = |t: usize| -> f64 {
        z.iter()
            .zip(&chain_means)
            .map(|(c, cm)| {
                (0..n - t)
                    .map(|i| (c[i] - cm) * (c[i + t] - cm))
                    .sum::<f64>()
                    / n as f64
            })
            .sum::<f64>()
            / m as f64
    };

    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;

    // Geyer: accumulate paired sums while positive, enforcing
    // monotone decrease.
    let max_lag = n - 1;
    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 1;
    while t + 1 <= max_lag {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        t += 2;
    }
    let total = (m * n) as f64;
    Ok(total / tau)
}

fn validate_diagnostic_input(draws: &[Vec<f64>]) -> Result<(), McmcError> {
    if draws.len() < 2 {
        return Err(McmcError::InsufficientChains(draws.len()));
    }
    let min_len = draws.iter().map(|c| c.len()).min().unwrap_or(0);
    if min_len < 4 {
        return Err(McmcError::InsufficientDraws(min_len));
    }
    Ok(())
}

/// Gaussian target used in tests and smoke checks.
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub precision: Vec<Vec<f64>>,
}

impl GaussianTarget {
    pub fn standard(dim: usize) -> Self {
        let mut precision = vec![vec![0.0; dim]; dim];
        for (i, row) in precision.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            mean: vec![0.0; dim],
            precision,
        }
    }
}

impl TargetDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let dim = self.mean.len();
        let mut logp = 0.0;
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        for i in 0..dim {
            for j in 0..dim {
                let term = self.precision[i][j] * (position[j] - self.mean[j]);
                grad[i] -= term;
                logp -= 0.5 * (position[i] - self.mean[i]) * term;
            }
        }
        logp
    }
}
