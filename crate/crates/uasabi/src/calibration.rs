//! Simulation-based calibration: rank statistics, ECDF-difference
//! curves with Monte Carlo simultaneous confidence bands, and recovery
//! summaries (posterior median and median absolute deviation).

use crate::numerics::RngStream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("posterior draws are empty")]
    EmptyDraws,
    #[error("need at least 20 ranks for a band, got {0}")]
    InsufficientReplications(usize),
    #[error("{truths} truths but {posteriors} posteriors")]
    LengthMismatch { truths: usize, posteriors: usize },
    #[error("rank {rank} exceeds draw count {l}")]
    RankOutOfRange { rank: usize, l: usize },
}

/// Ranks from one calibration experiment for a single parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankExperiment {
    pub ranks: Vec<usize>,
    /// Number of posterior draws L per replication; ranks lie in [0, L].
    pub draws_per_posterior: usize,
    pub band_level: f64,
}

impl RankExperiment {
    pub fn new(
        ranks: Vec<usize>,
        draws_per_posterior: usize,
        band_level: f64,
    ) -> Result<Self, CalibrationError> {
        for &r in &ranks {
            if r > draws_per_posterior {
                return Err(CalibrationError::RankOutOfRange {
                    rank: r,
                    l: draws_per_posterior,
                });
            }
        }
        Ok(Self {
            ranks,
            draws_per_posterior,
            band_level,
        })
    }

    pub fn n_replications(&self) -> usize {
        self.ranks.len()
    }
}

/// Rank of `truth` within `draws`: the count of draws strictly below
/// it. Each tied draw counts as below with probability 1/2, using the
/// caller's dedicated tie-break stream so ranks stay reproducible.
pub fn sbc_rank(truth: f64, draws: &[f64], rng: &mut RngStream) -> Result<usize, CalibrationError> {
    if draws.is_empty() {
        return Err(CalibrationError::EmptyDraws);
    }
    let mut rank = 0;
    for &d in draws {
        if d < truth {
            rank += 1;
        } else if d == truth && rng.gen_bool(0.5) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// ECDF-difference curve with a simultaneous Monte Carlo band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcdfBand {
    /// Sorted fractional ranks (rank / L).
    pub grid: Vec<f64>,
    /// ECDF minus uniform CDF at each grid point (post-step value).
    pub diffs: Vec<f64>,
    /// Constant half-width of the symmetric simultaneous band.
    pub halfwidth: f64,
    /// Sup norm of the empirical difference curve.
    pub sup_norm: f64,
    pub inside: bool,
    pub band_level: f64,
}

/// Sup-norm of the ECDF-vs-uniform difference for fractional ranks.
fn ecdf_sup_norm(sorted_fracs: &[f64]) -> f64 {
    let n = sorted_fracs.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &u) in sorted_fracs.iter().enumerate() {
        d = d
            .max(((k + 1) as f64 / n - u).abs())
            .max((k as f64 / n - u).abs());
    }
    d
}

/// Half-width of the tightest symmetric envelope containing `gamma` of
/// `n_sets` synthetic uniform rank experiments of the same size.
pub fn band_halfwidth(
    n_replications: usize,
    l: usize,
    gamma: f64,
    n_sets: usize,
    rng: &mut RngStream,
) -> f64 {
    let mut sups: Vec<f64> = (0..n_sets)
        .map(|_| {
            let mut fracs: Vec<f64> = (0..n_replications)
                .map(|_| rng.gen_range(0..=l) as f64 / l as f64)
                .collect();
            fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ecdf_sup_norm(&fracs)
        })
        .collect();
    sups.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((gamma * n_sets as f64).ceil() as usize).min(n_sets) - 1;
    sups[idx]
}

pub const BAND_MC_SETS: usize = 10_000;

/// Builds the ECDF-difference curve for a rank experiment and tests it
/// against the simultaneous band. The band stream only influences the
/// Monte Carlo envelope, not the curve.
pub fn ecdf_difference_band(
    ranks: &[usize],
    l: usize,
    gamma: f64,
    rng: &mut RngStream,
) -> Result<EcdfBand, CalibrationError> {
    if ranks.len() < 20 {
        return Err(CalibrationError::InsufficientReplications(ranks.len()));
    }
    for &r in ranks {
        if r > l {
            return Err(CalibrationError::RankOutOfRange { rank: r, l });
        }
    }
    let mut grid: Vec<f64> = ranks.iter().map(|&r| r as f64 / l as f64).collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = grid.len() as f64;
    let diffs: Vec<f64> = grid
        .iter()
        .enumerate()
        .map(|(k, &u)| (k + 1) as f64 / n - u)
        .collect();
    let sup_norm = ecdf_sup_norm(&grid);
    let halfwidth = band_halfwidth(ranks.len(), l, gamma, BAND_MC_SETS, rng);
    Ok(EcdfBand {
        grid,
        diffs,
        halfwidth,
        sup_norm,
        inside: sup_norm <= halfwidth,
        band_level: gamma,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub truth: f64,
    pub median: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub rows: Vec<RecoveryRow>,
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-replication posterior median and median absolute deviation
/// about that median.
pub fn recovery_stats(
    truths: &[f64],
    posteriors: &[Vec<f64>],
) -> Result<RecoverySummary, CalibrationError> {
    if truths.len() != posteriors.len() {
        return Err(CalibrationError::LengthMismatch {
            truths: truths.len(),
            posteriors: posteriors.len(),
        });
    }
    let rows = truths
        .iter()
        .zip(posteriors)
        .map(|(&truth, draws)| {
            if draws.is_empty() {
                return Err(CalibrationError::EmptyDraws);
            }
            let median = median_of(draws.clone());
            let deviation = median_of(draws.iter().map(|d| (d - median).abs()).collect());
            Ok(RecoveryRow {
                truth,
                median,
                deviation,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(RecoverySummary { rows })
}
