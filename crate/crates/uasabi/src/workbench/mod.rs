//! Case studies, benchmark harness, persistence formats, plot emission,
//! and the glue used by the command-line interface.

mod breakeven;
mod config;
mod io;
mod logsin;
mod plots;
mod study;
mod tabular;

pub use breakeven::{run_breakeven, BreakEvenReport};
pub use config::{
    McmcSection, NpeSection, PriorSection, StudyConfig, StudySection, SurrogateSection,
};
pub use io::{
    dataset_to_csv, load_dataset_csv, parse_dataset_csv, read_draws_csv, save_dataset_csv,
    write_draws_csv, ArtifactRef, Dataset, ExperimentManifest, PhaseTime,
};
pub use logsin::{logsin_eval, logsin_simulator, LOGSIN_OMEGA_BOUNDS, LOGSIN_X_BOUNDS};
pub use plots::{emit_plots, plot_ecdf_difference, plot_recovery, plot_runtime};
pub use study::{
    build_logsin_training_set, fit_study_surrogate, run_logsin_study, Method, MethodResult,
    StudyOutput,
};
pub use tabular::run_tabular_study;

use crate::calibration::CalibrationError;
use crate::inference::InferenceError;
use crate::mcmc::McmcError;
use crate::neural::NeuralError;
use crate::numerics::NumericsError;
use crate::polychaos::PolyError;
use crate::surrogate::SurrogateError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset schema error in column {column}: {message}")]
    Schema { column: String, message: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

impl WorkbenchError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        WorkbenchError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 2 config, 3 convergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkbenchError::Config(_) | WorkbenchError::Schema { .. } | WorkbenchError::Domain(_) => 2,
            WorkbenchError::Mcmc(_) => 3,
            WorkbenchError::Surrogate(SurrogateError::Unconverged { .. })
            | WorkbenchError::Surrogate(SurrogateError::Mcmc(_)) => 3,
            WorkbenchError::Inference(InferenceError::Mcmc(_))
            | WorkbenchError::Inference(InferenceError::EpostFailures { .. }) => 3,
            WorkbenchError::Io { .. } | WorkbenchError::MissingArtifact(_) => 4,
            _ => 2,
        }
    }
}
