//! End-to-end calibration study on the log-sine model: fit the
//! surrogate once, run each requested posterior method over a shared
//! set of ground truths, and write rank, band, and recovery artifacts.

use super::config::StudyConfig;
use super::io::{
    dataset_to_csv, file_sha256, ArtifactRef, Dataset, ExperimentManifest, PhaseTime,
};
use super::logsin::{logsin_eval, logsin_simulator};
use super::plots::emit_plots;
use super::WorkbenchError;
use crate::calibration::{
    ecdf_difference_band, recovery_stats, sbc_rank, EcdfBand, RankExperiment, RecoverySummary,
};
use crate::inference::{
    epost_posterior, npe_posterior, point_mcmc_posterior, train_npe, Generator, GeneratorMode,
    ObservationSet, PriorSpec,
};
use crate::mcmc::McmcConfig;
use crate::numerics::{sobol_points, RngStream};
use crate::polychaos::{truncation_indices, Basis1d, BasisSpec};
use crate::surrogate::{
    fit_surrogate, median, point_surrogate, SurrogatePosterior, SurrogatePrior,
    SurrogateTrainingSet, TrainingRow,
};
use std::path::Path;
use std::time::Instant;

/// Posterior approximation methods compared by the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Amortized posterior trained online against the simulator.
    FullAbi,
    /// Amortized posterior trained offline on a small simulation pool.
    LowAbi,
    /// Amortized posterior trained on the point surrogate.
    Sabi,
    /// Amortized posterior trained on error-adjusted surrogate draws.
    UaSabi,
    /// MCMC on the point surrogate with a fixed error scale.
    Point,
    /// Pooled per-surrogate-draw MCMC.
    EPost,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::FullAbi => "full_abi",
            Method::LowAbi => "low_abi",
            Method::Sabi => "sabi",
            Method::UaSabi => "ua_sabi",
            Method::Point => "point",
            Method::EPost => "epost",
        }
    }

    pub fn parse(label: &str) -> Result<Self, WorkbenchError> {
        match label {
            "full_abi" => Ok(Method::FullAbi),
            "low_abi" => Ok(Method::LowAbi),
            "sabi" => Ok(Method::Sabi),
            "ua_sabi" => Ok(Method::UaSabi),
            "point" => Ok(Method::Point),
            "epost" => Ok(Method::EPost),
            other => Err(WorkbenchError::Config(format!(
                "unknown method {other:?}; expected one of \
                 full_abi, low_abi, sabi, ua_sabi, point, epost"
            ))),
        }
    }

    /// Stable per-method id for seed derivation (independent of the
    /// order methods appear in the config).
    fn id(self) -> u64 {
        match self {
            Method::FullAbi => 1,
            Method::LowAbi => 2,
            Method::Sabi => 3,
            Method::UaSabi => 4,
            Method::Point => 5,
            Method::EPost => 6,
        }
    }

    fn is_amortized(self) -> bool {
        matches!(
            self,
            Method::FullAbi | Method::LowAbi | Method::Sabi | Method::UaSabi
        )
    }
}

/// Calibration verdicts for one method, per parameter coordinate.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub ranks: Vec<RankExperiment>,
    pub bands: Vec<EcdfBand>,
    pub recovery: Vec<RecoverySummary>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct StudyOutput {
    pub manifest: ExperimentManifest,
    pub results: Vec<MethodResult>,
    pub surrogate: SurrogatePosterior,
}

/// Quasi-random simulator design over the configured box, evaluated
/// through the log-sine model. `bounds` is [(x_lo, x_hi), (w_lo, w_hi)].
pub fn build_logsin_training_set(
    n_points: usize,
    bounds: &[(f64, f64)],
) -> Result<SurrogateTrainingSet, WorkbenchError> {
    if bounds.len() != 2 {
        return Err(WorkbenchError::Config(format!(
            "log-sine design needs 2 bound pairs, got {}",
            bounds.len()
        )));
    }
    // Skip the all-zeros point so the design never sits on the box
    // corner.
    let unit = sobol_points(2, n_points, true)?;
    let rows = unit
        .into_iter()
        .map(|u| {
            let x = bounds[0].0 + u[0] * (bounds[0].1 - bounds[0].0);
            let w = bounds[1].0 + u[1] * (bounds[1].1 - bounds[1].0);
            Ok(TrainingRow {
                inputs: vec![x],
                params: vec![w],
                output: logsin_eval(x, w)?,
            })
        })
        .collect::<Result<Vec<_>, WorkbenchError>>()?;
    Ok(SurrogateTrainingSet::new(rows)?)
}

/// Fits the configured tensor-Legendre surrogate to `data`.
pub fn fit_study_surrogate(
    config: &StudyConfig,
    data: &SurrogateTrainingSet,
    seed: u64,
) -> Result<SurrogatePosterior, WorkbenchError> {
    let dims = config.surrogate.design_bounds.len();
    let basis = BasisSpec {
        dims: config
            .surrogate
            .design_bounds
            .iter()
            .map(|&(lo, hi)| Basis1d::LegendreOnBox { lo, hi })
            .collect(),
    };
    let index_set = truncation_indices(dims, config.surrogate.degree);
    let prior = SurrogatePrior::new(
        config.surrogate.coef_prior.clone(),
        config.surrogate.sigma_prior.clone(),
    )?;
    let mcmc = McmcConfig {
        seed,
        ..config.mcmc.surrogate.clone()
    };
    Ok(fit_surrogate(data, &basis, &index_set, &prior, &mcmc, false)?)
}

fn mix(seed: u64, id: u64) -> u64 {
    // SplitMix64-style finalizer over (seed, id).
    let mut z = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn write_artifact(
    out: &Path,
    name: &str,
    contents: &str,
    artifacts: &mut Vec<ArtifactRef>,
) -> Result<(), WorkbenchError> {
    let path = out.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| WorkbenchError::io(path.display().to_string(), e))?;
    artifacts.push(ArtifactRef {
        path: name.to_string(),
        sha256: file_sha256(&path)?,
    });
    Ok(())
}

fn ranks_csv(ranks: &[RankExperiment], truths: &[Vec<f64>]) -> String {
    let mut out = String::from("replication,parameter,truth,rank,draws\n");
    for (d, experiment) in ranks.iter().enumerate() {
        for (r, &rank) in experiment.ranks.iter().enumerate() {
            out.push_str(&format!(
                "{r},{d},{},{rank},{}\n",
                truths[r][d], experiment.draws_per_posterior
            ));
        }
    }
    out
}

fn recovery_csv(recovery: &[RecoverySummary]) -> String {
    let mut out = String::from("replication,parameter,truth,median,deviation\n");
    for (d, summary) in recovery.iter().enumerate() {
        for (r, row) in summary.rows.iter().enumerate() {
            out.push_str(&format!(
                "{r},{d},{},{},{}\n",
                row.truth, row.median, row.deviation
            ));
        }
    }
    out
}

/// One posterior sample matrix per ground-truth replication.
fn method_posteriors(
    method: Method,
    config: &StudyConfig,
    prior: &PriorSpec,
    surrogate: &SurrogatePosterior,
    pairs: &[(Vec<f64>, ObservationSet)],
    seed: u64,
    out: &Path,
    artifacts: &mut Vec<ArtifactRef>,
) -> Result<Vec<Vec<Vec<f64>>>, WorkbenchError> {
    let l = config.study.posterior_draws;
    let stream = RngStream::new(seed, 0x5354_4459).substream(0x100 + method.id());
    if method.is_amortized() {
        let (mode, online) = match method {
            Method::FullAbi => (
                GeneratorMode::Simulator {
                    sim: logsin_simulator(),
                    budget: None,
                },
                true,
            ),
            Method::LowAbi => (
                GeneratorMode::Simulator {
                    sim: logsin_simulator(),
                    budget: Some(config.study.low_budget),
                },
                false,
            ),
            Method::Sabi => (
                GeneratorMode::PointSurrogate(point_surrogate(surrogate)?),
                true,
            ),
            Method::UaSabi => (GeneratorMode::UncertaintyAware(surrogate.clone()), true),
            _ => unreachable!(),
        };
        let mut generator = Generator::new(mode, config.study.observations_per_set, online);
        let (model, _losses) = train_npe(
            &mut generator,
            prior,
            &config.npe.settings,
            &config.npe.schedule,
            mix(seed, method.id()),
        )?;
        write_artifact(
            out,
            &format!("npe_{}.json", method.label()),
            &model.to_json(),
            artifacts,
        )?;
        pairs
            .iter()
            .enumerate()
            .map(|(r, (_, obs))| {
                let mut rng = stream.substream(r as u64);
                Ok(npe_posterior(&model, obs, l, &mut rng)?)
            })
            .collect()
    } else {
        match method {
            Method::Point => {
                let model = point_surrogate(surrogate)?;
                let sigma =
                    median((0..surrogate.n_draws()).map(|i| surrogate.sigma(i)).collect());
                // Spread L pooled draws over the configured chain count.
                let base = config.mcmc.point.clone();
                let mcmc = McmcConfig {
                    n_draws: l.div_ceil(base.n_chains),
                    ..base
                };
                pairs
                    .iter()
                    .enumerate()
                    .map(|(r, (_, obs))| {
                        let mcmc = McmcConfig {
                            seed: mix(mix(seed, method.id()), r as u64),
                            ..mcmc.clone()
                        };
                        Ok(point_mcmc_posterior(&model, sigma, prior, obs, &mcmc)?)
                    })
                    .collect()
            }
            Method::EPost => pairs
                .iter()
                .enumerate()
                .map(|(r, (_, obs))| {
                    Ok(epost_posterior(
                        surrogate,
                        prior,
                        obs,
                        &config.mcmc.epost,
                        mix(mix(seed, method.id()), r as u64),
                    )?)
                })
                .collect(),
            _ => unreachable!(),
        }
    }
}

/// Runs the full log-sine calibration study and writes all artifacts
/// (CSVs, model JSONs, plots, manifest) under `out`.
pub fn run_logsin_study(
    config: &StudyConfig,
    seed: u64,
    out: &Path,
) -> Result<StudyOutput, WorkbenchError> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| WorkbenchError::io(out.display().to_string(), e))?;
    let methods = config
        .study
        .methods
        .iter()
        .map(|label| Method::parse(label))
        .collect::<Result<Vec<_>, _>>()?;
    let started = Instant::now();
    let mut wall_times = Vec::new();
    let mut artifacts = Vec::new();
    let prior = config.prior.to_prior_spec();
    if prior.x_dim() != 1 || prior.omega_dim() != 1 {
        return Err(WorkbenchError::Config(format!(
            "log-sine study is 1 input x 1 parameter; prior declares {} x {}",
            prior.x_dim(),
            prior.omega_dim()
        )));
    }

    // Phase 1: simulator design and surrogate fit.
    let phase = Instant::now();
    let training = build_logsin_training_set(
        config.surrogate.design_points,
        &config.surrogate.design_bounds,
    )?;
    let dataset = Dataset {
        x_names: vec!["x_1".into()],
        omega_names: vec!["omega_1".into()],
        y_names: vec!["y_1".into()],
        rows: training
            .rows
            .iter()
            .map(|row| {
                let mut r = row.inputs.clone();
                r.extend_from_slice(&row.params);
                r.push(row.output);
                r
            })
            .collect(),
    };
    write_artifact(out, "training_set.csv", &dataset_to_csv(&dataset), &mut artifacts)?;
    let surrogate = fit_study_surrogate(config, &training, seed)?;
    write_artifact(
        out,
        "surrogate_posterior.json",
        &serde_json::to_string_pretty(&surrogate).expect("posterior serializes"),
        &mut artifacts,
    )?;
    wall_times.push(PhaseTime {
        phase: "surrogate_fit".into(),
        seconds: phase.elapsed().as_secs_f64(),
    });

    // Phase 2: shared ground truths and observation sets, reused by
    // every method so differences are attributable to the method alone.
    let phase = Instant::now();
    let mut pair_rng = RngStream::new(seed, 0x5354_4459).substream(1);
    let pairs: Vec<(Vec<f64>, ObservationSet)> = (0..config.study.n_ground_truths)
        .map(|_| {
            let omega = prior.sample_omega(&mut pair_rng);
            let elements = (0..config.study.observations_per_set)
                .map(|_| {
                    let x = prior.sample_x(&mut pair_rng);
                    let y = logsin_eval(x[0], omega[0])?;
                    Ok((x, vec![y]))
                })
                .collect::<Result<Vec<_>, WorkbenchError>>()?;
            Ok((omega, ObservationSet::new(elements)?))
        })
        .collect::<Result<Vec<_>, WorkbenchError>>()?;
    let truths: Vec<Vec<f64>> = pairs.iter().map(|(w, _)| w.clone()).collect();
    wall_times.push(PhaseTime {
        phase: "test_pair_generation".into(),
        seconds: phase.elapsed().as_secs_f64(),
    });

    // Phase 3: per-method posterior sampling and calibration.
    let q = prior.omega_dim();
    let mut results = Vec::new();
    let mut generator_modes = Vec::new();
    for &method in &methods {
        let phase = Instant::now();
        let posteriors = method_posteriors(
            method, config, &prior, &surrogate, &pairs, seed, out, &mut artifacts,
        )?;
        if method.is_amortized() {
            generator_modes.push(format!("{}:{}", method.label(), match method {
                Method::FullAbi | Method::LowAbi => "simulator",
                Method::Sabi => "point_surrogate",
                _ => "uncertainty_aware",
            }));
        }
        let stream = RngStream::new(seed, 0x5354_4459).substream(0x100 + method.id());
        let mut ranks = Vec::new();
        let mut bands = Vec::new();
        let mut recovery = Vec::new();
        for d in 0..q {
            let l = posteriors[0].len();
            let coord_ranks = posteriors
                .iter()
                .enumerate()
                .map(|(r, draws)| {
                    let coord: Vec<f64> = draws.iter().map(|v| v[d]).collect();
                    let mut rng = stream.substream(0x7000 + r as u64);
                    Ok(sbc_rank(truths[r][d], &coord, &mut rng)?)
                })
                .collect::<Result<Vec<usize>, WorkbenchError>>()?;
            let mut band_rng = stream.substream(0x8000 + d as u64);
            let band = ecdf_difference_band(
                &coord_ranks,
                l,
                config.study.band_level,
                &mut band_rng,
            )?;
            let truths_d: Vec<f64> = truths.iter().map(|w| w[d]).collect();
            let coords: Vec<Vec<f64>> = posteriors
                .iter()
                .map(|draws| draws.iter().map(|v| v[d]).collect())
                .collect();
            recovery.push(recovery_stats(&truths_d, &coords)?);
            ranks.push(RankExperiment::new(coord_ranks, l, config.study.band_level)?);
            bands.push(band);
        }
        write_artifact(
            out,
            &format!("ranks_{}.csv", method.label()),
            &ranks_csv(&ranks, &truths),
            &mut artifacts,
        )?;
        write_artifact(
            out,
            &format!("recovery_{}.csv", method.label()),
            &recovery_csv(&recovery),
            &mut artifacts,
        )?;
        write_artifact(
            out,
            &format!("band_{}.json", method.label()),
            &serde_json::to_string_pretty(&bands).expect("bands serialize"),
            &mut artifacts,
        )?;
        results.push(MethodResult {
            method,
            ranks,
            bands,
            recovery,
            seconds: phase.elapsed().as_secs_f64(),
        });
    }

    // Phase 4: plots.
    let phase = Instant::now();
    for name in emit_plots(out, &results)? {
        // The runtime chart embeds wall-clock times, so it is not
        // reproducible and stays out of the hashed artifact list.
        if name == "runtime.svg" {
            continue;
        }
        let path = out.join(&name);
        artifacts.push(ArtifactRef {
            path: name,
            sha256: file_sha256(&path)?,
        });
    }
    wall_times.extend(results.iter().map(|r| PhaseTime {
        phase: format!("method_{}", r.method.label()),
        seconds: r.seconds,
    }));
    wall_times.push(PhaseTime {
        phase: "plot_emission".into(),
        seconds: phase.elapsed().as_secs_f64(),
    });

    let manifest = ExperimentManifest {
        study_id: "logsin".into(),
        seed,
        generator_modes,
        config_json: config.to_json(),
        observation_design: "x_i drawn i.i.d. from p(x) per element; y noise-free model output"
            .into(),
        workers: rayon::current_num_threads(),
        artifacts,
        wall_times,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(StudyOutput {
        manifest,
        results,
        surrogate,
    })
}
