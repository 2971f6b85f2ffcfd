//! Experiment configuration in TOML.
//!
//! ```toml
//! horizon = 1000
//! runs = 500
//! seed = 1
//! output_dir = "out"
//!
//! [[systems]]
//! a = [[2.0, 1.0], [0.0, 1.0]]
//! c = [[1.0, 2.0]]
//! q = [[1.0, 0.0], [0.0, 1.0]]
//! r = [[1.0]]
//! # pi0 = [[...]]   optional, defaults to zero
//!
//! [scheduler]
//! kind = "greedy"          # offline | greedy | mdp
//! table = [2, 1, 1]        # offline only, one-based sensor numbers
//! ```
//!
//! Optional tables `[greedy]`, `[lower_bound]` and `[mdp]` override solver
//! settings.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lowerbound::{DEFAULT_ELL_MAX, DEFAULT_RATE_GRID};
use crate::mdp::MdpSettings;
use crate::model::{validate_system, LtiSystem, SystemSet};
use crate::scheduling::{GreedySettings, PeriodicTable};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Offline,
    Greedy,
    Mdp,
}

impl SchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Offline => "offline",
            SchedulerKind::Greedy => "greedy",
            SchedulerKind::Mdp => "mdp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSpec {
    pub kind: SchedulerKind,
    /// One-based sensor numbers, repeated with period `table.len()`.
    #[serde(default)]
    pub table: Option<Vec<usize>>,
    /// Trained policy to load; `mdp` trains one when absent.
    #[serde(default)]
    pub policy_file: Option<PathBuf>,
}

impl Default for SchedulerSpec {
    fn default() -> Self {
        Self {
            kind: SchedulerKind::Greedy,
            table: None,
            policy_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub pi0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LowerBoundSpec {
    pub ell_max: usize,
    pub rate_grid: usize,
}

impl Default for LowerBoundSpec {
    fn default() -> Self {
        Self {
            ell_max: DEFAULT_ELL_MAX,
            rate_grid: DEFAULT_RATE_GRID,
        }
    }
}

fn default_horizon() -> usize {
    1000
}
fn default_runs() -> usize {
    500
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub systems: Vec<SystemSpec>,
    #[serde(default)]
    pub scheduler: SchedulerSpec,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub greedy: GreedySettings,
    #[serde(default)]
    pub lower_bound: LowerBoundSpec,
    #[serde(default)]
    pub mdp: MdpSettings,
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let nr = rows.len();
    if nr == 0 {
        return Err(invalid(field, "matrix has no rows"));
    }
    let nc = rows[0].len();
    if nc == 0 {
        return Err(invalid(field, "matrix has an empty row"));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != nc {
            return Err(invalid(
                format!("{field}[{i}]"),
                format!("row has {} entries, expected {nc}", r.len()),
            ));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("{field}[{i}][{j}]"), "entry is not finite"));
        }
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Structural checks that do not need the Riccati solver.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.systems.is_empty() {
            return Err(invalid("systems", "at least one system is required"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.runs == 0 {
            return Err(invalid("runs", "must be at least 1"));
        }
        if self.lower_bound.ell_max == 0 {
            return Err(invalid("lower_bound.ell_max", "must be at least 1"));
        }
        if self.lower_bound.rate_grid == 0 {
            return Err(invalid("lower_bound.rate_grid", "must be at least 1"));
        }
        let n = self.systems.len();
        if let Some(t) = &self.scheduler.table {
            if t.is_empty() {
                return Err(invalid("scheduler.table", "must not be empty"));
            }
            if let Some((i, v)) = t.iter().enumerate().find(|(_, v)| **v == 0 || **v > n) {
                return Err(invalid(
                    format!("scheduler.table[{i}]"),
                    format!("sensor {v} not in 1..={n}"),
                ));
            }
        } else if self.scheduler.kind == SchedulerKind::Offline {
            return Err(invalid(
                "scheduler.table",
                "required for the offline scheduler",
            ));
        }
        self.system_set().map(|_| ())
    }

    pub fn system_set(&self) -> Result<SystemSet, ConfigError> {
        let mut out = Vec::with_capacity(self.systems.len());
        for (i, s) in self.systems.iter().enumerate() {
            let f = |name: &str| format!("systems[{i}].{name}");
            let a = matrix(&f("a"), &s.a)?;
            let c = matrix(&f("c"), &s.c)?;
            let q = matrix(&f("q"), &s.q)?;
            let r = matrix(&f("r"), &s.r)?;
            let pi0 = match &s.pi0 {
                Some(p) => matrix(&f("pi0"), p)?,
                None => DMatrix::zeros(a.nrows(), a.nrows()),
            };
            let sys =
                LtiSystem::new(a, c, q, r, pi0).map_err(|e| invalid(format!("systems[{i}]"), e))?;
            let report = validate_system(&sys);
            if let Some(e) = report.errors.first() {
                return Err(invalid(format!("systems[{i}]"), e));
            }
            out.push(sys);
        }
        SystemSet::new(out).map_err(|e| invalid("systems", e))
    }

    /// The configured table converted to zero-based indices.
    pub fn periodic_table(&self) -> Result<PeriodicTable, ConfigError> {
        let t = self
            .scheduler
            .table
            .as_ref()
            .ok_or_else(|| invalid("scheduler.table", "missing"))?;
        PeriodicTable::new(t.iter().map(|v| v - 1).collect(), self.systems.len())
            .map_err(|e| invalid("scheduler.table", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
horizon = 10
runs = 2
seed = 3

[[systems]]
a = [[2.0, 1.0], [0.0, 1.0]]
c = [[1.0, 2.0]]
q = [[1.0, 0.0], [0.0, 1.0]]
r = [[1.0]]

[scheduler]
kind = "offline"
table = [1]
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml_str(GOOD).unwrap();
        assert_eq!(cfg.horizon, 10);
        assert_eq!(cfg.periodic_table().unwrap().entries(), &[0]);
        assert_eq!(cfg.lower_bound.ell_max, DEFAULT_ELL_MAX);
        assert_eq!(cfg.mdp, MdpSettings::default());
    }

    #[test]
    fn ragged_matrix_names_the_row() {
        let bad = GOOD.replace("a = [[2.0, 1.0], [0.0, 1.0]]", "a = [[2.0, 1.0], [0.0]]");
        let err = ExperimentConfig::from_toml_str(&bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("systems[0].a[1]"), "{err}");
    }

    #[test]
    fn syntax_error_has_line() {
        let bad = GOOD.replace("runs = 2", "runs = ");
        let err = ExperimentConfig::from_toml_str(&bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = GOOD.replace("seed = 3", "seed = 3\nsede = 4");
        let err = ExperimentConfig::from_toml_str(&bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("sede"), "{err}");
    }

    #[test]
    fn table_out_of_range() {
        let bad = GOOD.replace("table = [1]", "table = [2]");
        let err = ExperimentConfig::from_toml_str(&bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("scheduler.table[0]"), "{err}");
    }

    #[test]
    fn zero_q_is_reported() {
        let bad = GOOD.replace(
            "q = [[1.0, 0.0], [0.0, 1.0]]",
            "q = [[0.0, 0.0], [0.0, 0.0]]",
        );
        let err = ExperimentConfig::from_toml_str(&bad)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("systems[0]") && err.contains("Q not PD"),
            "{err}"
        );
    }
}
