//! Experiment configuration: a flat JSON schema with mandatory seeds, a
//! canonical digest for replay verification, and validation errors that
//! name the offending field.

use crate::critical::CriticalParams;
use crate::equidistribution::Observable;
use crate::map::MapParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    MapAudit,
    PairAudit,
    CriticalMeasure,
    DecomposeAudit,
    EquiScan,
    Psi,
    Walk,
    Escape,
    Render,
    Acceptance,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Option<ExperimentKind> {
        serde_json::from_value(serde_json::Value::String(name.to_string())).ok()
    }

    pub fn name(&self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }
}

fn default_yhat() -> f64 {
    1.0
}
fn default_l() -> f64 {
    10.0
}

/// Map parameters as written in configs; `y_star` may be omitted to request
/// the automated choice.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub a: f64,
    pub gamma: f64,
    #[serde(default = "default_yhat")]
    pub y_hat_coeff: f64,
    #[serde(default = "default_l")]
    pub cutoff_l: f64,
    #[serde(default)]
    pub y_star: Option<f64>,
}

impl MapSection {
    pub fn build(&self) -> Result<MapParams, ConfigError> {
        let y_star = match self.y_star {
            Some(v) => v,
            None => {
                let probe =
                    MapParams::with_cutoffs(self.a, self.gamma, self.y_hat_coeff, self.cutoff_l, self.cutoff_l * 10.0)
                        .map_err(|e| ConfigError::Invalid(format!("map: {e}")))?;
                crate::critical::auto_y_star(&probe)
                    .map_err(|e| ConfigError::Invalid(format!("map.y_star (auto): {e}")))?
            }
        };
        MapParams::with_cutoffs(self.a, self.gamma, self.y_hat_coeff, self.cutoff_l, y_star)
            .map_err(|e| ConfigError::Invalid(format!("map: {e}")))
    }
}

/// Full experiment configuration (flat, mandatory seed).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub map: MapSection,
    /// explicit constants; omitted means the automated search
    #[serde(default)]
    pub critical: Option<CriticalParams>,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,

    // grids and sample counts (per-experiment; unused fields ignored by
    // experiments that do not need them)
    #[serde(default)]
    pub y_grid: Vec<f64>,
    #[serde(default)]
    pub gamma_grid: Vec<f64>,
    #[serde(default)]
    pub a_grid: Vec<f64>,
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default)]
    pub n_orbits: Option<usize>,
    #[serde(default)]
    pub t_steps: Option<u64>,
    #[serde(default)]
    pub max_iter: Option<u64>,

    /// observable as (mode, cos coefficient, sin coefficient) triples
    #[serde(default)]
    pub observable: Option<Vec<(u32, f64, f64)>>,
    /// base interval on the circle for pair experiments
    #[serde(default)]
    pub cell: Option<(f64, f64)>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub periods: Option<usize>,
    #[serde(default)]
    pub points_per_period: Option<usize>,
    #[serde(default)]
    pub horizon_levels: Option<i32>,
    #[serde(default)]
    pub s_grid: Vec<f64>,
    /// render window (x_lo, x_hi, y_lo, y_hi)
    #[serde(default)]
    pub window: Option<(f64, f64, f64, f64)>,
    #[serde(default)]
    pub pixels: Option<(usize, usize)>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.map.a < 0.0 {
            return Err(ConfigError::Invalid("map.a must be >= 0".into()));
        }
        if matches!(self.experiment, ExperimentKind::EquiScan) && self.y_grid.is_empty() {
            return Err(ConfigError::Invalid(
                "y_grid must be non-empty for equi-scan".into(),
            ));
        }
        if matches!(self.experiment, ExperimentKind::CriticalMeasure) && self.y_grid.is_empty() {
            return Err(ConfigError::Invalid(
                "y_grid must be non-empty for critical-measure".into(),
            ));
        }
        if let Some(t) = self.t_steps {
            if t > 100_000_000 {
                return Err(ConfigError::Invalid(
                    "t_steps exceeds the 1e8 cap".into(),
                ));
            }
        }
        if let Some((lo, hi)) = self.cell {
            if !(hi > lo) {
                return Err(ConfigError::Invalid("cell must satisfy hi > lo".into()));
            }
        }
        Ok(())
    }

    /// Canonical digest of the configuration (serialization of the parsed
    /// struct, so formatting differences do not matter).
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        crate::report::sha256_hex(canonical.as_bytes())
    }

    pub fn observable(&self) -> Observable {
        match &self.observable {
            Some(coeffs) => Observable {
                coeffs: coeffs.clone(),
            },
            None => Observable::cosine(1),
        }
    }

    pub fn cell_or_default(&self) -> (f64, f64) {
        self.cell.unwrap_or((1.35, 1.65))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_digest_stability() {
        let text = r#"{
            "experiment": "equi-scan",
            "map": {"a": 1.0, "gamma": 3.0},
            "seed": 42,
            "y_grid": [100.0, 1000.0]
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::EquiScan);
        let d1 = cfg.digest();
        // whitespace-insensitive: reparse a reformatted version
        let text2 = r#"{"experiment":"equi-scan","map":{"a":1.0,"gamma":3.0},"seed":42,"y_grid":[100.0,1000.0]}"#;
        let cfg2 = ExperimentConfig::from_json(text2).unwrap();
        assert_eq!(d1, cfg2.digest());
    }

    #[test]
    fn validation_names_the_field() {
        let text = r#"{
            "experiment": "equi-scan",
            "map": {"a": 1.0, "gamma": "three"},
            "seed": 1
        }"#;
        match ExperimentConfig::from_json(text) {
            Err(ConfigError::Parse { path, .. }) => assert!(path.contains("gamma"), "{path}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let empty_grid = r#"{
            "experiment": "equi-scan",
            "map": {"a": 1.0, "gamma": 3.0},
            "seed": 1
        }"#;
        match ExperimentConfig::from_json(empty_grid) {
            Err(ConfigError::Invalid(msg)) => assert!(msg.contains("y_grid")),
            other => panic!("expected invalid error, got {other:?}"),
        }
    }

    #[test]
    fn map_section_auto_y_star() {
        let section = MapSection {
            a: 1.0,
            gamma: 3.0,
            y_hat_coeff: 1.0,
            cutoff_l: 10.0,
            y_star: None,
        };
        let params = section.build().unwrap();
        assert_eq!(params.y_star, 100.0);
    }
}
