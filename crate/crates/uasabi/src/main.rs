//! Command-line front end. Every subcommand takes the same trio of
//! arguments (`--config`, `--seed`, `--out`) and exits 0 on success,
//! 2 on configuration errors, 3 on convergence failures, and 4 on I/O
//! errors.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use uasabi::calibration::{EcdfBand, RecoveryRow, RecoverySummary};
use uasabi::inference::{
    npe_posterior, train_npe, Generator, GeneratorMode, ObservationSet,
};
use uasabi::neural::NpeModel;
use uasabi::numerics::RngStream;
use uasabi::surrogate::point_surrogate;
use uasabi::workbench::{
    build_logsin_training_set, dataset_to_csv, fit_study_surrogate, load_dataset_csv,
    logsin_simulator, plot_ecdf_difference, plot_recovery, run_breakeven, run_logsin_study,
    run_tabular_study, write_draws_csv, Dataset, Method, StudyConfig, WorkbenchError,
};

#[derive(Parser)]
#[command(name = "uasabi", about = "Surrogate-based amortized Bayesian inference workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file; omit to use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for all randomized phases.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the Bayesian surrogate to the quasi-random simulator design.
    FitSurrogate,
    /// Train one amortized posterior per amortized method in the config.
    Train,
    /// Sample an amortized posterior for an observation table.
    Infer,
    /// Run the full calibration study (ranks, bands, recovery, plots).
    Sbc,
    /// Time amortized inference against the per-draw MCMC baseline.
    Benchmark,
    /// Re-render plots from band and recovery artifacts in --out.
    Plot,
    /// Fit the surrogate from an ingested simulation table.
    Ingest,
}

fn load_config(path: &Option<PathBuf>) -> Result<StudyConfig, WorkbenchError> {
    match path {
        Some(p) => StudyConfig::load(p),
        None => Ok(StudyConfig::default()),
    }
}

fn ensure_out(out: &Path) -> Result<(), WorkbenchError> {
    std::fs::create_dir_all(out).map_err(|e| WorkbenchError::io(out.display().to_string(), e))
}

fn write_out(out: &Path, name: &str, contents: &str) -> Result<(), WorkbenchError> {
    let path = out.join(name);
    std::fs::write(&path, contents).map_err(|e| WorkbenchError::io(path.display().to_string(), e))
}

fn fit_and_save_surrogate(
    config: &StudyConfig,
    seed: u64,
    out: &Path,
) -> Result<uasabi::surrogate::SurrogatePosterior, WorkbenchError> {
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
            .map(|r| vec![r.inputs[0], r.params[0], r.output])
            .collect(),
    };
    write_out(out, "training_set.csv", &dataset_to_csv(&dataset))?;
    let surrogate = fit_study_surrogate(config, &training, seed)?;
    write_out(
        out,
        "surrogate_posterior.json",
        &serde_json::to_string_pretty(&surrogate).expect("posterior serializes"),
    )?;
    Ok(surrogate)
}

fn cmd_train(config: &StudyConfig, seed: u64, out: &Path) -> Result<(), WorkbenchError> {
    let surrogate = fit_and_save_surrogate(config, seed, out)?;
    let prior = config.prior.to_prior_spec();
    for label in &config.study.methods {
        let method = Method::parse(label)?;
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
                GeneratorMode::PointSurrogate(point_surrogate(&surrogate)?),
                true,
            ),
            Method::UaSabi => (GeneratorMode::UncertaintyAware(surrogate.clone()), true),
            // MCMC-only methods have nothing to train.
            Method::Point | Method::EPost => continue,
        };
        let mut generator = Generator::new(mode, config.study.observations_per_set, online);
        let (model, _) = train_npe(
            &mut generator,
            &prior,
            &config.npe.settings,
            &config.npe.schedule,
            seed,
        )?;
        write_out(out, &format!("npe_{label}.json"), &model.to_json())?;
        eprintln!("trained {label}");
    }
    Ok(())
}

fn cmd_infer(config: &StudyConfig, seed: u64, out: &Path) -> Result<(), WorkbenchError> {
    let obs_path = config.study.dataset.as_ref().ok_or_else(|| {
        WorkbenchError::Config(
            "inference requires study.dataset to name an observation table".into(),
        )
    })?;
    let table = load_dataset_csv(Path::new(obs_path))?;
    // Rows form one observation set; omega columns (if meaningful) are
    // the ground truth and are not used here.
    let nx = table.x_names.len();
    let elements = (0..table.rows.len())
        .map(|r| (table.rows[r][..nx].to_vec(), table.y(r).to_vec()))
        .collect();
    let obs = ObservationSet::new(elements)?;

    // Use the first amortized method's trained model.
    let label = config
        .study
        .methods
        .iter()
        .find(|l| {
            Method::parse(l)
                .map(|m| !matches!(m, Method::Point | Method::EPost))
                .unwrap_or(false)
        })
        .ok_or_else(|| WorkbenchError::Config("no amortized method in study.methods".into()))?;
    let model_path = out.join(format!("npe_{label}.json"));
    let text = std::fs::read_to_string(&model_path)
        .map_err(|e| WorkbenchError::io(model_path.display().to_string(), e))?;
    let model =
        NpeModel::from_json(&text).map_err(|e| WorkbenchError::Config(e.to_string()))?;
    let mut rng = RngStream::new(seed, 0x494e_46);
    let draws = npe_posterior(&model, &obs, config.study.posterior_draws, &mut rng)?;
    write_draws_csv(&out.join("posterior_draws.csv"), &draws)?;
    eprintln!("wrote {} draws from {label}", draws.len());
    Ok(())
}

fn cmd_plot(out: &Path) -> Result<(), WorkbenchError> {
    let entries = std::fs::read_dir(out)
        .map_err(|e| WorkbenchError::io(out.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect::<Vec<_>>();
    let mut plotted = 0;
    for name in &entries {
        if let Some(label) = name
            .strip_prefix("band_")
            .and_then(|s| s.strip_suffix(".json"))
        {
            let text = std::fs::read_to_string(out.join(name))
                .map_err(|e| WorkbenchError::io(name.clone(), e))?;
            let bands: Vec<EcdfBand> = serde_json::from_str(&text)
                .map_err(|e| WorkbenchError::Config(format!("{name}: {e}")))?;
            for (d, band) in bands.iter().enumerate() {
                write_out(
                    out,
                    &format!("ecdf_{label}_p{d}.svg"),
                    &plot_ecdf_difference(
                        band,
                        &format!("{label}: rank ECDF difference (omega_{})", d + 1),
                    ),
                )?;
                plotted += 1;
            }
        }
        if let Some(label) = name
            .strip_prefix("recovery_")
            .and_then(|s| s.strip_suffix(".csv"))
        {
            let text = std::fs::read_to_string(out.join(name))
                .map_err(|e| WorkbenchError::io(name.clone(), e))?;
            for (d, summary) in parse_recovery_csv(&text)?.into_iter().enumerate() {
                write_out(
                    out,
                    &format!("recovery_{label}_p{d}.svg"),
                    &plot_recovery(&summary, &format!("{label}: recovery (omega_{})", d + 1)),
                )?;
                plotted += 1;
            }
        }
    }
    if plotted == 0 {
        return Err(WorkbenchError::MissingArtifact(format!(
            "no band_*.json or recovery_*.csv artifacts in {}",
            out.display()
        )));
    }
    eprintln!("rendered {plotted} plots");
    Ok(())
}

/// Parses the study's recovery artifact back into per-parameter
/// summaries (columns: replication,parameter,truth,median,deviation).
fn parse_recovery_csv(text: &str) -> Result<Vec<RecoverySummary>, WorkbenchError> {
    let mut out: Vec<RecoverySummary> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(WorkbenchError::Schema {
                column: format!("<row {}>", i + 1),
                message: format!("{} fields, expected 5", fields.len()),
            });
        }
        let parse = |f: &str, col: &str| {
            f.parse::<f64>().map_err(|_| WorkbenchError::Schema {
                column: col.into(),
                message: format!("non-numeric value {f:?} in row {}", i + 1),
            })
        };
        let d: usize = fields[1].parse().map_err(|_| WorkbenchError::Schema {
            column: "parameter".into(),
            message: format!("non-integer value {:?} in row {}", fields[1], i + 1),
        })?;
        while out.len() <= d {
            out.push(RecoverySummary { rows: vec![] });
        }
        out[d].rows.push(RecoveryRow {
            truth: parse(fields[2], "truth")?,
            median: parse(fields[3], "median")?,
            deviation: parse(fields[4], "deviation")?,
        });
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<(), WorkbenchError> {
    let config = load_config(&cli.config)?;
    ensure_out(&cli.out)?;
    match cli.command {
        Command::FitSurrogate => {
            fit_and_save_surrogate(&config, cli.seed, &cli.out)?;
            eprintln!("surrogate fitted");
            Ok(())
        }
        Command::Train => cmd_train(&config, cli.seed, &cli.out),
        Command::Infer => cmd_infer(&config, cli.seed, &cli.out),
        Command::Sbc => {
            let output = run_logsin_study(&config, cli.seed, &cli.out)?;
            for result in &output.results {
                for (d, band) in result.bands.iter().enumerate() {
                    eprintln!(
                        "{} omega_{}: sup={:.4} band={:.4} {}",
                        result.method.label(),
                        d + 1,
                        band.sup_norm,
                        band.halfwidth,
                        if band.inside { "inside" } else { "outside" }
                    );
                }
            }
            Ok(())
        }
        Command::Benchmark => {
            let report = run_breakeven(&config, cli.seed, config.study.n_ground_truths)?;
            write_out(
                &cli.out,
                "breakeven.json",
                &serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            match report.crossing {
                Some(i) => eprintln!("break-even after {} inferences", i + 1),
                None => eprintln!("no break-even within {} inferences", report.ua_increments.len()),
            }
            if report.timer_warning {
                eprintln!("warning: increments near timer resolution");
            }
            Ok(())
        }
        Command::Plot => cmd_plot(&cli.out),
        Command::Ingest => {
            run_tabular_study(&config, cli.seed, &cli.out)?;
            eprintln!("surrogate fitted from ingested table");
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Ok(workers) = std::env::var("UASABI_WORKERS") {
        match workers.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("worker pool not yet initialized");
            }
            _ => {
                eprintln!("error: UASABI_WORKERS must be a positive integer, got {workers:?}");
                std::process::exit(2);
            }
        }
    }
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
