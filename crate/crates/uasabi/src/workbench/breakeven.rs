//! Runtime break-even analysis: one-off amortized training cost versus
//! the per-inference cost of the pooled per-draw MCMC baseline.

use super::config::StudyConfig;
use super::logsin::logsin_eval;
use super::study::{build_logsin_training_set, fit_study_surrogate};
use super::WorkbenchError;
use crate::inference::{epost_posterior, npe_posterior, train_npe, Generator, GeneratorMode, ObservationSet};
use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakEvenReport {
    /// One-off cost: surrogate-aware amortized training (seconds).
    pub training_seconds: f64,
    /// Per-inference cost of drawing from the amortized posterior.
    pub ua_increments: Vec<f64>,
    /// Per-inference cost of the pooled per-draw MCMC baseline.
    pub epost_increments: Vec<f64>,
    /// Cumulative amortized cost including training.
    pub ua_cumulative: Vec<f64>,
    pub epost_cumulative: Vec<f64>,
    /// First inference index (0-based) at which the amortized
    /// cumulative cost drops below the baseline's, if any.
    pub crossing: Option<usize>,
    pub workers: usize,
    /// Set when increments are near the timer resolution (<1ms) and
    /// ratios should not be trusted.
    pub timer_warning: bool,
}

/// Trains the uncertainty-aware amortized posterior once, then times
/// `n_runs` fresh inferences under both it and the per-draw MCMC
/// baseline on the same observation sets.
pub fn run_breakeven(
    config: &StudyConfig,
    seed: u64,
    n_runs: usize,
) -> Result<BreakEvenReport, WorkbenchError> {
    config.validate()?;
    let prior = config.prior.to_prior_spec();
    let training = build_logsin_training_set(
        config.surrogate.design_points,
        &config.surrogate.design_bounds,
    )?;
    let surrogate = fit_study_surrogate(config, &training, seed)?;

    let start = Instant::now();
    let mut generator = Generator::new(
        GeneratorMode::UncertaintyAware(surrogate.clone()),
        config.study.observations_per_set,
        true,
    );
    let (model, _) = train_npe(
        &mut generator,
        &prior,
        &config.npe.settings,
        &config.npe.schedule,
        seed,
    )?;
    let training_seconds = start.elapsed().as_secs_f64();

    let mut obs_rng = RngStream::new(seed, 0x4245_4b).substream(0);
    let mut draw_rng = RngStream::new(seed, 0x4245_4b).substream(1);
    let l = config.study.posterior_draws;
    let mut ua_increments = Vec::with_capacity(n_runs);
    let mut epost_increments = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let omega = prior.sample_omega(&mut obs_rng);
        let elements = (0..config.study.observations_per_set)
            .map(|_| {
                let x = prior.sample_x(&mut obs_rng);
                let y = logsin_eval(x[0], omega[0])?;
                Ok((x, vec![y]))
            })
            .collect::<Result<Vec<_>, WorkbenchError>>()?;
        let obs = ObservationSet::new(elements)?;

        let t = Instant::now();
        let _ = npe_posterior(&model, &obs, l, &mut draw_rng)?;
        ua_increments.push(t.elapsed().as_secs_f64());

        let t = Instant::now();
        let _ = epost_posterior(&surrogate, &prior, &obs, &config.mcmc.epost, seed ^ run as u64)?;
        epost_increments.push(t.elapsed().as_secs_f64());
    }

    let cumulate = |increments: &[f64], offset: f64| {
        let mut total = offset;
        increments
            .iter()
            .map(|&dt| {
                total += dt;
                total
            })
            .collect::<Vec<f64>>()
    };
    let ua_cumulative = cumulate(&ua_increments, training_seconds);
    let epost_cumulative = cumulate(&epost_increments, 0.0);
    let crossing = ua_cumulative
        .iter()
        .zip(&epost_cumulative)
        .position(|(ua, ep)| ua <= ep);
    let timer_warning = ua_increments
        .iter()
        .chain(&epost_increments)
        .any(|&dt| dt < 1e-3);
    Ok(BreakEvenReport {
        training_seconds,
        ua_increments,
        epost_increments,
        ua_cumulative,
        epost_cumulative,
        crossing,
        workers: rayon::current_num_threads(),
        timer_warning,
    })
}
