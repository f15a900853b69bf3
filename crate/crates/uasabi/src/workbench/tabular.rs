//! Surrogate fitting from an ingested simulation table: bases are built
//! from the declared priors via data-free moment orthogonalization, so
//! arbitrary (non-uniform, non-normal) input distributions are
//! supported.

use super::config::StudyConfig;
use super::io::{load_dataset_csv, Dataset};
use super::WorkbenchError;
use crate::mcmc::McmcConfig;
use crate::polychaos::{apc_basis_1d, truncation_indices, Basis1d, BasisSpec};
use crate::surrogate::{fit_surrogate, SurrogatePosterior, SurrogatePrior, SurrogateTrainingSet, TrainingRow};
use std::path::Path;

fn check_columns(
    dataset: &Dataset,
    prefix: &str,
    found: usize,
    expected: usize,
) -> Result<(), WorkbenchError> {
    let _ = dataset;
    if found != expected {
        // Name the first absent column so the error is actionable.
        let column = if found < expected {
            format!("{prefix}{}", found + 1)
        } else {
            format!("{prefix}{found}")
        };
        return Err(WorkbenchError::Schema {
            column,
            message: format!(
                "prior declares {expected} {prefix}* dimensions, table has {found}"
            ),
        });
    }
    Ok(())
}

/// Fits the surrogate to a CSV table of simulator runs, with one
/// moment-orthogonalized basis per declared prior dimension. The table
/// path comes from the config's `study.dataset` field.
pub fn run_tabular_study(
    config: &StudyConfig,
    seed: u64,
    out: &Path,
) -> Result<SurrogatePosterior, WorkbenchError> {
    config.validate()?;
    let path = config.study.dataset.as_ref().ok_or_else(|| {
        WorkbenchError::Config("ingestion requires study.dataset to name a CSV table".into())
    })?;
    let dataset = load_dataset_csv(Path::new(path))?;
    fit_tabular_surrogate(config, &dataset, seed, out)
}

pub fn fit_tabular_surrogate(
    config: &StudyConfig,
    dataset: &Dataset,
    seed: u64,
    out: &Path,
) -> Result<SurrogatePosterior, WorkbenchError> {
    let prior = config.prior.to_prior_spec();
    check_columns(dataset, "x_", dataset.x_names.len(), prior.x_dim())?;
    check_columns(dataset, "omega_", dataset.omega_names.len(), prior.omega_dim())?;
    if dataset.y_names.len() != 1 {
        return Err(WorkbenchError::Schema {
            column: "y_1".into(),
            message: format!(
                "surrogate output is scalar, table has {} y_* columns",
                dataset.y_names.len()
            ),
        });
    }

    let degree = config.surrogate.degree;
    let dims = prior
        .x
        .iter()
        .chain(&prior.omega)
        .map(|dist| Ok(Basis1d::Apc { rows: apc_basis_1d(dist, degree)? }))
        .collect::<Result<Vec<_>, WorkbenchError>>()?;
    let basis = BasisSpec { dims };
    let index_set = truncation_indices(basis.dim(), degree);

    let nx = dataset.x_names.len();
    let rows = (0..dataset.rows.len())
        .map(|r| TrainingRow {
            inputs: dataset.rows[r][..nx].to_vec(),
            params: dataset.omega(r).to_vec(),
            output: dataset.y(r)[0],
        })
        .collect();
    let data = SurrogateTrainingSet::new(rows)?;
    let surrogate_prior = SurrogatePrior::new(
        config.surrogate.coef_prior.clone(),
        config.surrogate.sigma_prior.clone(),
    )?;
    let mcmc = McmcConfig {
        seed,
        ..config.mcmc.surrogate.clone()
    };
    let posterior = fit_surrogate(&data, &basis, &index_set, &surrogate_prior, &mcmc, false)?;

    std::fs::create_dir_all(out).map_err(|e| WorkbenchError::io(out.display().to_string(), e))?;
    let path = out.join("surrogate_posterior.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&posterior).expect("posterior serializes"),
    )
    .map_err(|e| WorkbenchError::io(path.display().to_string(), e))?;
    Ok(posterior)
}
