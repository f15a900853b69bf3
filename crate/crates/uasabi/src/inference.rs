//! Training-data generators (simulator, point-surrogate,
//! uncertainty-aware surrogate), the NPE training loop, amortized
//! posterior sampling, and the surrogate-based MCMC baselines (point
//! and expected-posterior).

use crate::mcmc::{hmc_sample, McmcConfig, McmcError, TargetDensity};
use crate::neural::{
    adam_step, cosine_lr, npe_nll_and_grad, Activation, AdamState, CouplingFlow, DeepSet, Mlp,
    MlpSpec, NeuralError, NpeModel, NpeProvenance, Standardization, TrainItem, TrainingSchedule,
};
use crate::numerics::{DistributionSpec, RngStream};
use crate::polychaos::{basis_eval_with_grad, PceModel, PolyError};
use crate::surrogate::{sample_error_adjusted, SurrogateError, SurrogatePosterior};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("simulation budget of {0} items exhausted")]
    BudgetExhausted(usize),
    #[error("offline training requires a pool size or simulator budget")]
    MissingPoolSize,
    #[error("non-finite loss at step {step} (batch digest {digest})")]
    NonFiniteLoss { step: usize, digest: String },
    #[error("{failed} of {total} per-draw MCMC runs failed (> 5%)")]
    EpostFailures { failed: usize, total: usize },
    #[error("surrogate posterior contains no draws")]
    EmptySurrogatePosterior,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

/// Independent priors over simulator inputs x and parameters omega.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSpec {
    pub x: Vec<DistributionSpec>,
    pub omega: Vec<DistributionSpec>,
}

impl PriorSpec {
    pub fn x_dim(&self) -> usize {
        self.x.len()
    }

    pub fn omega_dim(&self) -> usize {
        self.omega.len()
    }

    pub fn sample_x(&self, rng: &mut RngStream) -> Vec<f64> {
        self.x.iter().map(|d| d.sample(rng)).collect()
    }

    pub fn sample_omega(&self, rng: &mut RngStream) -> Vec<f64> {
        self.omega.iter().map(|d| d.sample(rng)).collect()
    }
}

/// Simulator handle: maps (x, omega) to a scalar output; the stream
/// carries any simulator-internal noise.
pub type Simulator = Arc<dyn Fn(&[f64], &[f64], &mut RngStream) -> f64 + Send + Sync>;

pub enum GeneratorMode {
    Simulator { sim: Simulator, budget: Option<usize> },
    PointSurrogate(PceModel),
    UncertaintyAware(SurrogatePosterior),
}

impl GeneratorMode {
    pub fn label(&self) -> &'static str {
        match self {
            GeneratorMode::Simulator { .. } => "simulator",
            GeneratorMode::PointSurrogate(_) => "point_surrogate",
            GeneratorMode::UncertaintyAware(_) => "uncertainty_aware",
        }
    }
}

/// One inference condition: a set of (x, y) observations that share a
/// single ground-truth parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSet {
    pub elements: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ObservationSet {
    pub fn new(elements: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self, InferenceError> {
        if elements.is_empty() {
            return Err(InferenceError::DimensionMismatch(
                "observation set is empty".into(),
            ));
        }
        let (nx, ny) = (elements[0].0.len(), elements[0].1.len());
        for (x, y) in &elements {
            if x.len() != nx || y.len() != ny {
                return Err(InferenceError::DimensionMismatch(
                    "inhomogeneous observation set".into(),
                ));
            }
        }
        Ok(Self { elements })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

pub struct TrainingItem {
    pub set: ObservationSet,
    pub omega: Vec<f64>,
}

/// Stateful training-data source. `observations_per_set` is the number
/// of (x, y) elements per item; offline mode pre-generates a pool.
pub struct Generator {
    pub mode: GeneratorMode,
    pub observations_per_set: usize,
    pub online: bool,
    /// Pool size for offline non-simulator modes (simulator mode uses
    /// its budget).
    pub pool_size: Option<usize>,
    items_generated: usize,
}

impl Generator {
    pub fn new(mode: GeneratorMode, observations_per_set: usize, online: bool) -> Self {
        assert!(observations_per_set >= 1);
        Self {
            mode,
            observations_per_set,
            online,
            pool_size: None,
            items_generated: 0,
        }
    }

    pub fn items_generated(&self) -> usize {
        self.items_generated
    }

    /// Draws one (ObservationSet, omega) pair: omega once per item,
    /// x per element, and in uncertainty-aware mode one surrogate draw
    /// shared by all elements of the item.
    pub fn generate_training_item(
        &mut self,
        prior: &PriorSpec,
        rng: &mut RngStream,
    ) -> Result<TrainingItem, InferenceError> {
        if let GeneratorMode::Simulator {
            budget: Some(b), ..
        } = &self.mode
        {
            if self.items_generated >= *b {
                return Err(InferenceError::BudgetExhausted(*b));
            }
        }
        let omega = prior.sample_omega(rng);
        let mut elements = Vec::with_capacity(self.observations_per_set);
        match &self.mode {
            GeneratorMode::Simulator { sim, .. } => {
                for _ in 0..self.observations_per_set {
                    let x = prior.sample_x(rng);
                    let y = sim(&x, &omega, rng);
                    elements.push((x, vec![y]));
                }
            }
            GeneratorMode::PointSurrogate(model) => {
                for _ in 0..self.observations_per_set {
                    let x = prior.sample_x(rng);
                    let mut point = x.clone();
                    point.extend_from_slice(&omega);
                    let y = crate::polychaos::pce_predict(model, &point)?;
                    elements.push((x, vec![y]));
                }
            }
            GeneratorMode::UncertaintyAware(posterior) => {
                if posterior.n_draws() == 0 {
                    return Err(InferenceError::EmptySurrogatePosterior);
                }
                let i = rng.gen_range(0..posterior.n_draws());
                let coeffs = posterior.coefficients(i).to_vec();
                let sigma = posterior.sigma(i);
                for _ in 0..self.observations_per_set {
                    let x = prior.sample_x(rng);
                    let y = sample_error_adjusted(&coeffs, sigma, posterior, &x, &omega, rng)?;
                    elements.push((x, vec![y]));
                }
            }
        }
        self.items_generated += 1;
        Ok(TrainingItem {
            set: ObservationSet { elements },
            omega,
        })
    }
}

/// Network shape settings for a fresh NPE.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpeSettings {
    pub summary_dim: usize,
    pub element_hidden: Vec<usize>,
    pub post_hidden: Vec<usize>,
    pub flow_hidden: Vec<usize>,
    pub n_blocks: usize,
    pub clamp: f64,
    pub calibration_size: usize,
}

impl Default for NpeSettings {
    fn default() -> Self {
        Self {
            summary_dim: 10,
            element_hidden: vec![10, 10],
            post_hidden: vec![10, 10],
            flow_hidden: vec![10, 10],
            n_blocks: 4,
            clamp: 1.9,
            calibration_size: 4096,
        }
    }
}

fn standardization_from_items(
    items: &[TrainingItem],
    x_dim: usize,
    y_dim: usize,
    omega_dim: usize,
) -> Standardization {
    let stats = |values: Vec<Vec<f64>>| -> (Vec<f64>, Vec<f64>) {
        let dim = values.first().map_or(0, |v| v.len());
        let n = values.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| values.iter().map(|v| v[j]).sum::<f64>() / n)
            .collect();
        let sd: Vec<f64> = (0..dim)
            .map(|j| {
                let var =
                    values.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                var.sqrt().max(1e-12)
            })
            .collect();
        (mean, sd)
    };
    let xs: Vec<Vec<f64>> = items
        .iter()
        .flat_map(|it| it.set.elements.iter().map(|(x, _)| x.clone()))
        .collect();
    let ys: Vec<Vec<f64>> = items
        .iter()
        .flat_map(|it| it.set.elements.iter().map(|(_, y)| y.clone()))
        .collect();
    let omegas: Vec<Vec<f64>> = items.iter().map(|it| it.omega.clone()).collect();
    let (x_mean, x_sd) = if x_dim > 0 {
        stats(xs)
    } else {
        (vec![], vec![])
    };
    let (y_mean, y_sd) = stats(ys);
    let (omega_mean, omega_sd) = stats(omegas);
    debug_assert_eq!(y_mean.len(), y_dim);
    debug_assert_eq!(omega_mean.len(), omega_dim);
    Standardization {
        x_mean,
        x_sd,
        y_mean,
        y_sd,
        omega_mean,
        omega_sd,
    }
}

fn batch_digest(batch: &[TrainingItem]) -> String {
    let mut hasher = Sha256::new();
    for item in batch {
        for (x, y) in &item.set.elements {
            for v in x.iter().chain(y) {
                hasher.update(v.to_le_bytes());
            }
        }
        for v in &item.omega {
            hasher.update(v.to_le_bytes());
        }
        hasher.update([0xff]);
    }
    format!("{:x}", hasher.finalize())
}

/// Trains an NPE against the generator by stochastic gradient descent on
/// the batch-mean negative log posterior density (Adam, cosine
/// schedule). Returns the trained model and the per-step loss trace.
///
/// Determinism: with a single worker the result is a pure function of
/// the seed; multi-worker upstream generation would change batch
/// composition, so training itself stays single-threaded.
pub fn train_npe(
    generator: &mut Generator,
    prior: &PriorSpec,
    settings: &NpeSettings,
    schedule: &TrainingSchedule,
    seed: u64,
) -> Result<(NpeModel, Vec<f64>), InferenceError> {
    let root = RngStream::new(seed, 0x4e50_45);
    let mut init_rng = root.substream(0);
    let mut data_rng = root.substream(1);
    let mut aux_rng = root.substream(2);
    let mut shuffle_rng = root.substream(3);

    let x_dim = prior.x_dim();
    let y_dim = 1;
    let q = prior.omega_dim();

    // Fresh networks: DeepSet element/post nets plus an
    // identity-initialized coupling flow.
    let mut element_widths = vec![x_dim + y_dim];
    element_widths.extend_from_slice(&settings.element_hidden);
    element_widths.push(settings.summary_dim);
    let mut post_widths = vec![settings.summary_dim];
    post_widths.extend_from_slice(&settings.post_hidden);
    post_widths.push(settings.summary_dim);
    let mut deepset = DeepSet::new(
        Mlp::random(MlpSpec::new(element_widths, Activation::Tanh)?, &mut init_rng),
        Mlp::random(MlpSpec::new(post_widths, Activation::Tanh)?, &mut init_rng),
    )?;
    let mut flow = CouplingFlow::new(
        q,
        settings.summary_dim,
        settings.n_blocks,
        &settings.flow_hidden,
        settings.clamp,
        &mut init_rng,
    )?;
    let aux = flow.augmented_dim > q;

    // Offline mode pre-generates the pool; standardization comes from
    // the pool itself. Online mode draws a dedicated calibration batch.
    let mut pool: Vec<TrainingItem> = Vec::new();
    let standardization;
    if generator.online {
        let calib: Vec<TrainingItem> = (0..settings.calibration_size)
            .map(|_| generator.generate_training_item(prior, &mut data_rng))
            .collect::<Result<_, _>>()?;
        standardization = standardization_from_items(&calib, x_dim, y_dim, q);
    } else {
        let size = match (&generator.mode, generator.pool_size) {
            (_, Some(s)) => s,
            (GeneratorMode::Simulator { budget: Some(b), .. }, None) => *b,
            _ => return Err(InferenceError::MissingPoolSize),
        };
        for _ in 0..size {
            pool.push(generator.generate_training_item(prior, &mut data_rng)?);
        }
        standardization = standardization_from_items(&pool, x_dim, y_dim, q);
    }
    standardization.validate()?;

    let mut params = Vec::with_capacity(deepset.param_count() + flow.param_count());
    deepset.flatten_into(&mut params);
    flow.flatten_into(&mut params);
    let n_ds = deepset.param_count();
    let mut adam = AdamState::new(params.len());
    let total = schedule.total_steps();
    let mut losses = Vec::with_capacity(total);
    let mut pool_order: Vec<usize> = (0..pool.len()).collect();
    let mut pool_cursor = pool.len(); // force shuffle before first use

    let mut raw_batch: Vec<TrainingItem> = Vec::with_capacity(schedule.batch_size);
    for step in 0..total {
        raw_batch.clear();
        if generator.online {
            for _ in 0..schedule.batch_size {
                raw_batch.push(generator.generate_training_item(prior, &mut data_rng)?);
            }
        } else {
            for _ in 0..schedule.batch_size {
                if pool_cursor >= pool.len() {
                    pool_order.shuffle(&mut shuffle_rng);
                    pool_cursor = 0;
                }
                let it = &pool[pool_order[pool_cursor]];
                raw_batch.push(TrainingItem {
                    set: it.set.clone(),
                    omega: it.omega.clone(),
                });
                pool_cursor += 1;
            }
        }
        let batch: Vec<TrainItem> = raw_batch
            .iter()
            .map(|item| {
                let elements = item
                    .set
                    .elements
                    .iter()
                    .map(|(x, y)| standardization.element(x, y))
                    .collect();
                let mut omega_aug = standardization.standardize_omega(&item.omega);
                if aux {
                    omega_aug.push(StandardNormal.sample(&mut aux_rng));
                }
                TrainItem {
                    elements,
                    omega_aug,
                }
            })
            .collect();
        let (loss, grad) = npe_nll_and_grad(&deepset, &flow, &batch)?;
        if !loss.is_finite() {
            return Err(InferenceError::NonFiniteLoss {
                step,
                digest: batch_digest(&raw_batch),
            });
        }
        let lr = cosine_lr(step, total, schedule.lr0, schedule.alpha);
        adam_step(&mut adam, &mut params, &grad, lr);
        deepset.load_from(&params[..n_ds]);
        flow.load_from(&params[n_ds..]);
        losses.push(loss);
    }

    let model = NpeModel {
        deepset,
        flow,
        standardization,
        provenance: NpeProvenance {
            mode: format!(
                "{}_{}",
                generator.mode.label(),
                if generator.online { "online" } else { "offline" }
            ),
            seed,
            schedule: schedule.clone(),
        },
    };
    Ok((model, losses))
}

/// Amortized posterior: summarizes the observation set once and draws
/// `n_draws` parameters from the flow, de-standardized.
pub fn npe_posterior(
    npe: &NpeModel,
    obs: &ObservationSet,
    n_draws: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>, InferenceError> {
    let x_dim = npe.standardization.x_mean.len();
    let y_dim = npe.standardization.y_mean.len();
    for (x, y) in &obs.elements {
        if x.len() != x_dim || y.len() != y_dim {
            return Err(InferenceError::DimensionMismatch(format!(
                "observation dims ({}, {}) do not match model ({x_dim}, {y_dim})",
                x.len(),
                y.len()
            )));
        }
    }
    let elements: Vec<Vec<f64>> = obs
        .elements
        .iter()
        .map(|(x, y)| npe.standardization.element(x, y))
        .collect();
    let s = npe.deepset.summary(&elements)?;
    (0..n_draws)
        .map(|_| {
            let std = npe.flow.sample(&s, rng)?;
            Ok(npe.standardization.destandardize_omega(&std))
        })
        .collect()
}

/// Monotone map from the unconstrained sampling scale to a prior's
/// support, with log-Jacobian terms folded into the target.
#[derive(Debug, Clone, Copy)]
enum Transform {
    Identity,
    /// omega = exp(u), for supports bounded below at 0.
    Log,
    /// omega = lo + (hi - lo) * sigmoid(u).
    Logit { lo: f64, hi: f64 },
}

impl Transform {
    fn for_prior(prior: &DistributionSpec) -> Transform {
        let (lo, hi) = prior.support();
        match (lo.is_finite(), hi.is_finite()) {
            (false, false) => Transform::Identity,
            (true, false) => {
                debug_assert_eq!(lo, 0.0);
                Transform::Log
            }
            (true, true) => Transform::Logit { lo, hi },
            (false, true) => unreachable!("no supported prior is bounded only above"),
        }
    }

    /// Inverse of `apply`: unconstrained coordinate for an omega value.
    fn unconstrain(&self, w: f64) -> f64 {
        match *self {
            Transform::Identity => w,
            Transform::Log => w.ln(),
            Transform::Logit { lo, hi } => ((w - lo) / (hi - w)).ln(),
        }
    }

    /// Returns (omega, d omega / d u, log |J|, d log|J| / d u).
    fn apply(&self, u: f64) -> (f64, f64, f64, f64) {
        match *self {
            Transform::Identity => (u, 1.0, 0.0, 0.0),
            Transform::Log => {
                let w = u.exp();
                (w, w, u, 1.0)
            }
            Transform::Logit { lo, hi } => {
                let s = 1.0 / (1.0 + (-u).exp());
                let span = hi - lo;
                (
                    lo + span * s,
                    span * s * (1.0 - s),
                    span.ln() + s.ln() + (1.0 - s).ln(),
                    1.0 - 2.0 * s,
                )
            }
        }
    }
}

/// HMC target over omega (on the unconstrained scale) for a fixed
/// surrogate (c, sigma) and observation set.
struct OmegaPosteriorTarget<'a> {
    model: &'a PceModel,
    sigma: f64,
    prior: &'a PriorSpec,
    obs: &'a ObservationSet,
    transforms: Vec<Transform>,
}

impl<'a> OmegaPosteriorTarget<'a> {
    fn new(
        model: &'a PceModel,
        sigma: f64,
        prior: &'a PriorSpec,
        obs: &'a ObservationSet,
    ) -> Self {
        let transforms = prior.omega.iter().map(Transform::for_prior).collect();
        Self {
            model,
            sigma,
            prior,
            obs,
            transforms,
        }
    }

    fn constrain(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.transforms)
            .map(|(&v, t)| t.apply(v).0)
            .collect()
    }
}

impl TargetDensity for OmegaPosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.prior.omega_dim()
    }

    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let q = self.dim();
        let x_dim = self.obs.elements[0].0.len();
        let mut omega = vec![0.0; q];
        let mut domega = vec![0.0; q];
        let mut logp = 0.0;
        for (d, (&u, t)) in position.iter().zip(&self.transforms).enumerate() {
            let (w, dw, log_j, dlog_j) = t.apply(u);
            omega[d] = w;
            domega[d] = dw;
            let lp = self.prior.omega[d].logpdf(w);
            logp += lp + log_j;
            grad[d] = self.prior.omega[d].dlogpdf(w) * dw + dlog_j;
        }
        let inv_var = 1.0 / (self.sigma * self.sigma);
        for (x, y) in &self.obs.elements {
            let mut point = x.clone();
            point.extend_from_slice(&omega);
            let (vals, grads) =
                basis_eval_with_grad(&self.model.basis, &self.model.index_set, &point)
                    .expect("dimensions validated at construction");
            let pred: f64 = vals
                .iter()
                .zip(&self.model.coefficients)
                .map(|(v, c)| v * c)
                .sum();
            let r = y[0] - pred;
            logp += -0.5 * (2.0 * std::f64::consts::PI).ln() - self.sigma.ln()
                - 0.5 * r * r * inv_var;
            for d in 0..q {
                let dpred: f64 = grads[x_dim + d]
                    .iter()
                    .zip(&self.model.coefficients)
                    .map(|(g, c)| g * c)
                    .sum();
                grad[d] += r * dpred * inv_var * domega[d];
            }
        }
        logp
    }

    /// Start chains at prior draws rather than uniform(-2, 2): outside
    /// the design box the polynomial surrogate oscillates wildly and
    /// grows spurious likelihood modes with negligible posterior mass,
    /// and chains started out there get stuck in them.
    fn initial_position(&self, rng: &mut RngStream, out: &mut [f64]) {
        for (d, (p, t)) in out.iter_mut().zip(&self.transforms).enumerate() {
            *p = t.unconstrain(self.prior.omega[d].sample(rng));
        }
    }
}

/// Posterior over omega for the point surrogate with a fixed error
/// scale, sampled by HMC and mapped back to the constrained scale.
pub fn point_mcmc_posterior(
    model: &PceModel,
    sigma_fixed: f64,
    prior: &PriorSpec,
    obs: &ObservationSet,
    mcmc: &McmcConfig,
) -> Result<Vec<Vec<f64>>, InferenceError> {
    if sigma_fixed <= 0.0 {
        return Err(InferenceError::DimensionMismatch(format!(
            "sigma_fixed must be positive, got {sigma_fixed}"
        )));
    }
    let target = OmegaPosteriorTarget::new(model, sigma_fixed, prior, obs);
    let out = hmc_sample(&target, mcmc)?;
    Ok(out
        .pooled()
        .iter()
        .map(|u| target.constrain(u))
        .collect())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerDrawMcmc {
    pub warmup: usize,
    pub draws: usize,
}

impl Default for PerDrawMcmc {
    fn default() -> Self {
        Self {
            warmup: 1000,
            draws: 4,
        }
    }
}

/// Expected-posterior baseline: one independent single-chain MCMC per
/// surrogate posterior draw (c, sigma), pooled. Runs in parallel across
/// draws; per-draw seeds are derived from the draw index, so the result
/// does not depend on the worker count.
pub fn epost_posterior(
    posterior: &SurrogatePosterior,
    prior: &PriorSpec,
    obs: &ObservationSet,
    per_draw: &PerDrawMcmc,
    seed: u64,
) -> Result<Vec<Vec<f64>>, InferenceError> {
    if posterior.n_draws() == 0 {
        return Err(InferenceError::EmptySurrogatePosterior);
    }
    let results: Vec<Result<Vec<Vec<f64>>, McmcError>> = (0..posterior.n_draws())
        .into_par_iter()
        .map(|i| {
            let model = posterior.pce_for_draw(i);
            let sigma = posterior.sigma(i);
            let target = OmegaPosteriorTarget::new(&model, sigma, prior, obs);
            let config = McmcConfig {
                n_chains: 1,
                n_warmup: per_draw.warmup,
                n_draws: per_draw.draws,
                seed: mix_seed(seed, i as u64),
                ..Default::default()
            };
            hmc_sample(&target, &config)
                .map(|out| out.pooled().iter().map(|u| target.constrain(u)).collect())
        })
        .collect();
    let total = results.len();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed * 20 > total {
        return Err(InferenceError::EpostFailures { failed, total });
    }
    Ok(results.into_iter().flatten().flatten().collect())
}

/// SplitMix64-style mix so per-draw seeds are decorrelated but pure in
/// (seed, index).
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
