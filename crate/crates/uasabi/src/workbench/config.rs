//! Experiment configuration: one JSON document with sections
//! {prior, surrogate, npe, mcmc, study}. Unknown keys are rejected so
//! typos fail loudly instead of silently running a different study.

use super::WorkbenchError;
use crate::inference::{NpeSettings, PerDrawMcmc, PriorSpec};
use crate::mcmc::McmcConfig;
use crate::neural::TrainingSchedule;
use crate::numerics::DistributionSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub prior: PriorSection,
    pub surrogate: SurrogateSection,
    pub npe: NpeSection,
    pub mcmc: McmcSection,
    pub study: StudySection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub x: Vec<DistributionSpec>,
    pub omega: Vec<DistributionSpec>,
}

impl Default for PriorSection {
    /// Log-sine study defaults: x uniform on the design range, omega
    /// normal around 1.
    fn default() -> Self {
        Self {
            x: vec![DistributionSpec::uniform(1.0, 200.0).expect("valid bounds")],
            omega: vec![DistributionSpec::normal(1.0, 0.2).expect("valid params")],
        }
    }
}

impl PriorSection {
    pub fn to_prior_spec(&self) -> PriorSpec {
        PriorSpec {
            x: self.x.clone(),
            omega: self.omega.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub degree: usize,
    pub design_points: usize,
    /// Per-dimension design box for the quasi-random training design
    /// (inputs first, then parameters).
    pub design_bounds: Vec<(f64, f64)>,
    pub coef_prior: DistributionSpec,
    pub sigma_prior: DistributionSpec,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            degree: 3,
            design_points: 16,
            design_bounds: vec![(1.0, 200.0), (0.6, 1.4)],
            coef_prior: DistributionSpec::normal(0.0, 5.0).expect("valid params"),
            sigma_prior: DistributionSpec::half_normal(0.5).expect("valid params"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NpeSection {
    pub settings: NpeSettings,
    pub schedule: TrainingSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub surrogate: McmcConfig,
    pub point: McmcConfig,
    pub epost: PerDrawMcmc,
}

impl Default for McmcSection {
    fn default() -> Self {
        Self {
            surrogate: McmcConfig {
                n_draws: 250,
                ..Default::default()
            },
            point: McmcConfig::default(),
            epost: PerDrawMcmc::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub observations_per_set: usize,
    pub n_ground_truths: usize,
    pub posterior_draws: usize,
    pub band_level: f64,
    /// Offline simulation budget for the low-budget variant.
    pub low_budget: usize,
    /// Which methods to run; defaults to all six.
    pub methods: Vec<String>,
    /// Dataset path for ingestion studies.
    pub dataset: Option<String>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            observations_per_set: 4,
            n_ground_truths: 200,
            posterior_draws: 4000,
            band_level: 0.95,
            low_budget: 64,
            methods: vec![
                "full_abi".into(),
                "low_abi".into(),
                "sabi".into(),
                "ua_sabi".into(),
                "point".into(),
                "epost".into(),
            ],
            dataset: None,
        }
    }
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            prior: PriorSection::default(),
            surrogate: SurrogateSection::default(),
            npe: NpeSection::default(),
            mcmc: McmcSection::default(),
            study: StudySection::default(),
        }
    }
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self, WorkbenchError> {
        let config: StudyConfig =
            serde_json::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, WorkbenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorkbenchError::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), WorkbenchError> {
        let dims = self.prior.x.len() + self.prior.omega.len();
        if self.surrogate.design_bounds.len() != dims {
            return Err(WorkbenchError::Config(format!(
                "{} design bounds for {} prior dimensions",
                self.surrogate.design_bounds.len(),
                dims
            )));
        }
        for &(lo, hi) in &self.surrogate.design_bounds {
            if !(lo < hi) {
                return Err(WorkbenchError::Config(format!(
                    "degenerate design bounds ({lo}, {hi})"
                )));
            }
        }
        if self.study.observations_per_set == 0 || self.study.posterior_draws == 0 {
            return Err(WorkbenchError::Config(
                "observations_per_set and posterior_draws must be positive".into(),
            ));
        }
        if !(0.0 < self.study.band_level && self.study.band_level < 1.0) {
            return Err(WorkbenchError::Config(format!(
                "band level {} outside (0, 1)",
                self.study.band_level
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let config = StudyConfig::default();
        let parsed = StudyConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(config.to_json(), parsed.to_json());
        assert_eq!(parsed.study.n_ground_truths, 200);
        assert_eq!(parsed.npe.schedule.total_steps(), 12_800);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = StudyConfig::from_json(r#"{"study": {"n_ground_truth": 10}}"#);
        assert!(matches!(err, Err(WorkbenchError::Config(_))), "{err:?}");
        let err = StudyConfig::from_json(r#"{"simulator": {}}"#);
        assert!(matches!(err, Err(WorkbenchError::Config(_))));
    }

    #[test]
    fn partial_configs_use_defaults() {
        let config = StudyConfig::from_json(r#"{"study": {"n_ground_truths": 10}}"#).unwrap();
        assert_eq!(config.study.n_ground_truths, 10);
        assert_eq!(config.study.posterior_draws, 4000);
        assert_eq!(config.surrogate.design_points, 16);
    }

    #[test]
    fn mismatched_bounds_rejected() {
        let err = StudyConfig::from_json(r#"{"surrogate": {"design_bounds": [[0.0, 1.0]]}}"#);
        assert!(matches!(err, Err(WorkbenchError::Config(_))));
    }
}
