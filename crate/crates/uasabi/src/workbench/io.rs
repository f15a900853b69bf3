//! Persistence: dataset and draw CSVs (UTF-8, LF, shortest round-trip
//! decimals) and the experiment manifest with artifact hashes and a
//! wall-time ledger.

use super::WorkbenchError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Tabular simulator evaluations: `x_*` input columns, `omega_*`
/// parameter columns, `y_*` output columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_names: Vec<String>,
    pub omega_names: Vec<String>,
    pub y_names: Vec<String>,
    /// Row-major values in header order: x columns, omega columns, y
    /// columns.
    pub rows: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn n_columns(&self) -> usize {
        self.x_names.len() + self.omega_names.len() + self.y_names.len()
    }

    pub fn x(&self, row: usize) -> &[f64] {
        &self.rows[row][..self.x_names.len()]
    }

    pub fn omega(&self, row: usize) -> &[f64] {
        let a = self.x_names.len();
        &self.rows[row][a..a + self.omega_names.len()]
    }

    pub fn y(&self, row: usize) -> &[f64] {
        let a = self.x_names.len() + self.omega_names.len();
        &self.rows[row][a..]
    }
}

pub fn load_dataset_csv(path: &Path) -> Result<Dataset, WorkbenchError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| WorkbenchError::io(path.display().to_string(), e))?;
    parse_dataset_csv(&text)
}

pub fn parse_dataset_csv(text: &str) -> Result<Dataset, WorkbenchError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| WorkbenchError::Schema {
        column: "<header>".into(),
        message: "empty file".into(),
    })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let (mut x_names, mut omega_names, mut y_names) = (vec![], vec![], vec![]);
    // Columns must arrive grouped as x_*, omega_*, y_* so row slices
    // stay contiguous.
    let mut phase = 0;
    for name in &names {
        let this = if name.starts_with("x_") {
            0
        } else if name.starts_with("omega_") {
            1
        } else if name.starts_with("y_") {
            2
        } else {
            return Err(WorkbenchError::Schema {
                column: name.clone(),
                message: "column must be named x_*, omega_*, or y_*".into(),
            });
        };
        if this < phase {
            return Err(WorkbenchError::Schema {
                column: name.clone(),
                message: "columns must be grouped x_*, omega_*, y_* in order".into(),
            });
        }
        phase = this;
        match this {
            0 => x_names.push(name.clone()),
            1 => omega_names.push(name.clone()),
            _ => y_names.push(name.clone()),
        }
    }
    if omega_names.is_empty() {
        return Err(WorkbenchError::Schema {
            column: "omega_*".into(),
            message: "no parameter columns".into(),
        });
    }
    if y_names.is_empty() {
        return Err(WorkbenchError::Schema {
            column: "y_*".into(),
            message: "no output columns".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(WorkbenchError::Schema {
                column: format!("<row {}>", i + 2),
                message: format!("{} fields, expected {}", fields.len(), names.len()),
            });
        }
        let row = fields
            .iter()
            .zip(&names)
            .map(|(f, name)| {
                f.trim().parse::<f64>().map_err(|_| WorkbenchError::Schema {
                    column: name.clone(),
                    message: format!("non-numeric value {f:?} in row {}", i + 2),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(Dataset {
        x_names,
        omega_names,
        y_names,
        rows,
    })
}

/// Shortest round-trip decimal for f64 (Rust's default float display).
fn fmt_float(v: f64) -> String {
    format!("{v}")
}

pub fn dataset_to_csv(dataset: &Dataset) -> String {
    let mut out = String::new();
    let header: Vec<&str> = dataset
        .x_names
        .iter()
        .chain(&dataset.omega_names)
        .chain(&dataset.y_names)
        .map(|s| s.as_str())
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in &dataset.rows {
        let fields: Vec<String> = row.iter().map(|&v| fmt_float(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn save_dataset_csv(dataset: &Dataset, path: &Path) -> Result<(), WorkbenchError> {
    std::fs::write(path, dataset_to_csv(dataset))
        .map_err(|e| WorkbenchError::io(path.display().to_string(), e))
}

/// Posterior draw matrix as CSV with columns `omega_1..omega_q`.
pub fn write_draws_csv(path: &Path, draws: &[Vec<f64>]) -> Result<(), WorkbenchError> {
    let q = draws.first().map_or(0, |d| d.len());
    let mut out = String::new();
    let header: Vec<String> = (1..=q).map(|i| format!("omega_{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for d in draws {
        let fields: Vec<String> = d.iter().map(|&v| fmt_float(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| WorkbenchError::io(path.display().to_string(), e))
}

pub fn read_draws_csv(path: &Path) -> Result<Vec<Vec<f64>>, WorkbenchError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| WorkbenchError::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let _header = lines.next();
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .map(|f| {
                    f.parse::<f64>().map_err(|_| WorkbenchError::Schema {
                        column: "omega_*".into(),
                        message: format!("non-numeric value {f:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

/// Provenance record for one experiment: enough to rerun it and to
/// verify its outputs have not drifted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub study_id: String,
    pub seed: u64,
    pub generator_modes: Vec<String>,
    pub config_json: String,
    /// i.i.d. draws from p(x) per observation; recorded because the
    /// observation design is a declared choice, not an external given.
    pub observation_design: String,
    pub workers: usize,
    pub artifacts: Vec<ArtifactRef>,
    pub wall_times: Vec<PhaseTime>,
    pub total_seconds: f64,
}

impl ExperimentManifest {
    pub fn save(&self, path: &Path) -> Result<(), WorkbenchError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| WorkbenchError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, WorkbenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorkbenchError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| WorkbenchError::Config(e.to_string()))
    }

    /// Checks that every referenced artifact exists and hash-matches.
    pub fn verify_artifacts(&self, base: &Path) -> Result<(), WorkbenchError> {
        for artifact in &self.artifacts {
            let path = base.join(&artifact.path);
            let digest = file_sha256(&path)?;
            if digest != artifact.sha256 {
                return Err(WorkbenchError::MissingArtifact(format!(
                    "{} hash mismatch: manifest {} vs file {digest}",
                    artifact.path, artifact.sha256
                )));
            }
        }
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String, WorkbenchError> {
    let bytes =
        std::fs::read(path).map_err(|e| WorkbenchError::io(path.display().to_string(), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_byte_identical() {
        let text = "x_1,omega_1,y_1\n1,0.6,2.5\n200,1.4000000000000001,5.634969309039452\n";
        let parsed = parse_dataset_csv(text).unwrap();
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(dataset_to_csv(&parsed), text);
    }

    #[test]
    fn schema_errors_name_the_column() {
        let err = parse_dataset_csv("x_1,z_1,y_1\n1,2,3\n").unwrap_err();
        match err {
            WorkbenchError::Schema { column, .. } => assert_eq!(column, "z_1"),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_dataset_csv("x_1,y_1\n1,2\n").unwrap_err();
        match err {
            WorkbenchError::Schema { column, .. } => assert_eq!(column, "omega_*"),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_dataset_csv("x_1,omega_1,y_1\n1,oops,3\n").unwrap_err();
        match err {
            WorkbenchError::Schema { column, message } => {
                assert_eq!(column, "omega_1");
                assert!(message.contains("oops"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn misordered_columns_rejected() {
        let err = parse_dataset_csv("omega_1,x_1,y_1\n1,2,3\n").unwrap_err();
        assert!(matches!(err, WorkbenchError::Schema { .. }));
    }

    #[test]
    fn draws_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.csv");
        let draws = vec![vec![0.1, -2.0], vec![1.0 / 3.0, 5e-12]];
        write_draws_csv(&path, &draws).unwrap();
        let loaded = read_draws_csv(&path).unwrap();
        assert_eq!(draws, loaded);
        // Writing what we loaded is byte-identical.
        let bytes = std::fs::read(&path).unwrap();
        write_draws_csv(&path, &loaded).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn manifest_verifies_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.csv");
        std::fs::write(&file, "x\n1\n").unwrap();
        let manifest = ExperimentManifest {
            study_id: "t".into(),
            seed: 1,
            generator_modes: vec![],
            config_json: String::new(),
            observation_design: String::new(),
            workers: 1,
            artifacts: vec![ArtifactRef {
                path: "a.csv".into(),
                sha256: file_sha256(&file).unwrap(),
            }],
            wall_times: vec![],
            total_seconds: 0.0,
        };
        manifest.verify_artifacts(dir.path()).unwrap();
        std::fs::write(&file, "x\n2\n").unwrap();
        assert!(manifest.verify_artifacts(dir.path()).is_err());
    }
}
