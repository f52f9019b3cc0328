//! Experiment configuration: one JSON document describing the market, the
//! cone, the utility, the grid, solver and simulation options, the
//! certificate direction and the output file names.

use std::path::Path;

use conehjb::grid::GridSpec;
use conehjb::solver::SolverOptions;
use conehjb::{ConeConfig, ConeSpec, LevyModel, UtilitySpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub model: LevyModel,
    pub cone: ConeConfig,
    pub utility: UtilitySpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub certificate: Option<CertificateConfig>,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub outputs: OutputNames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Initial position.
    pub x: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    /// `zero`, `merton`, `grid` or `grid:FILE`.
    pub policy: String,
    /// No-trade band of the Merton policy.
    pub band: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { x: vec![0.5, 0.5], horizon: 20.0, dt: 1e-3, n_paths: 10_000, policy: "grid".into(), band: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateConfig {
    pub p: Vec<f64>,
    pub rho: f64,
    /// Verification nodes: radii up to `r_max` times angles.
    #[serde(default = "default_nodes_radial")]
    pub n_radial: usize,
    #[serde(default = "default_nodes_angular")]
    pub n_angular: usize,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
}

fn default_nodes_radial() -> usize {
    12
}

fn default_nodes_angular() -> usize {
    40
}

fn default_r_max() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Coarsest mesh; the main grid when absent.
    pub base: Option<GridSpec>,
    /// Solver step on the coarsest mesh; the solver step when absent.
    pub dt: Option<f64>,
    pub levels: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { base: None, dt: None, levels: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputNames {
    pub field: String,
    pub diagnostics: String,
    pub results: String,
    pub certificate: String,
    pub refine: String,
    pub timings: String,
}

impl Default for OutputNames {
    fn default() -> Self {
        Self {
            field: "field.csv".into(),
            diagnostics: "diagnostics.json".into(),
            results: "results.csv".into(),
            certificate: "cert.json".into(),
            refine: "refine.json".into(),
            timings: "timings.csv".into(),
        }
    }
}

/// Parses a config document. A `diagnostics.json` written by `solve` is
/// accepted too: its embedded `config` is used.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Parse { field: None, message: e.to_string() })?;
    let value = match value {
        serde_json::Value::Object(mut m) if !m.contains_key("schema_version") && m.contains_key("config") => {
            m.remove("config").expect("checked")
        }
        v => v,
    };
    if let Some(v) = value.get("schema_version") {
        if v.as_u64() != Some(SCHEMA_VERSION as u64) {
            return Err(CliError::invalid("schema_version", format!("expected {SCHEMA_VERSION}, got {v}")));
        }
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let field = match inner.strip_prefix("missing field `").and_then(|s| s.split('`').next()) {
            Some(name) if path == "." => Some(name.to_string()),
            Some(name) => Some(format!("{path}.{name}")),
            None if path != "." => Some(path),
            None => None,
        };
        CliError::Parse { field, message: inner }
    })
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let cfg = parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Checks every block with its module validator and the cross-block
    /// dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::invalid("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        self.utility.validate().map_err(|e| CliError::invalid(utility_field(&e), e))?;
        self.model.validate().map_err(|e| CliError::invalid("model", e))?;
        let cone = self.cone_spec()?;
        if cone.dim() != self.model.dim() {
            return Err(CliError::invalid("cone", format!("dimension {} differs from model dimension {}", cone.dim(), self.model.dim())));
        }
        self.solver.validate().map_err(|e| CliError::invalid("solver", e))?;
        let g = &self.grid;
        if !(g.r_max > 0.0) || g.n_radial < 1 || g.n_angular < 2 || g.levels_per_doubling < 1 {
            return Err(CliError::invalid("grid", "need r_max > 0, n_radial >= 1, n_angular >= 2, levels_per_doubling >= 1"));
        }
        let s = &self.simulation;
        if s.x.len() != self.model.dim() {
            return Err(CliError::invalid("simulation.x", format!("expected {} coordinates", self.model.dim())));
        }
        if !(s.horizon > 0.0) || !(s.dt > 0.0) {
            return Err(CliError::invalid("simulation", "horizon and dt must be > 0"));
        }
        crate::commands::PolicyChoice::parse(&s.policy).map_err(|e| CliError::invalid("simulation.policy", e))?;
        if let Some(c) = &self.certificate {
            if c.p.len() != self.model.dim() {
                return Err(CliError::invalid("certificate.p", format!("expected {} coordinates", self.model.dim())));
            }
            if !(c.rho > 0.0 && c.rho < 1.0) {
                return Err(CliError::invalid("certificate.rho", format!("{} not in (0, 1)", c.rho)));
            }
        }
        if self.refine.levels < 1 {
            return Err(CliError::invalid("refine.levels", "must be >= 1"));
        }
        Ok(())
    }

    pub fn cone_spec(&self) -> Result<ConeSpec> {
        self.cone.build().map_err(|e| CliError::invalid("cone", e))
    }
}

fn utility_field(e: &conehjb::Error) -> String {
    match e {
        conehjb::Error::InvalidParameter { name, .. } => format!("utility.{name}"),
        _ => "utility".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "model": { "mu": [0.0, 0.07], "xi": [[0.0], [0.3]] },
        "cone": { "costs": [[0.0, 0.01], [0.01, 0.0]] },
        "utility": { "gamma": 0.3, "beta": 0.2 },
        "grid": { "r_max": 1.0, "n_radial": 10, "n_angular": 11 }
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.simulation, SimulationConfig::default());
        assert_eq!(cfg.outputs.field, "field.csv");
        assert!(cfg.certificate.is_none());
    }

    #[test]
    fn serialized_config_parses_back() {
        let cfg = parse(MINIMAL).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
        let wrapped = serde_json::json!({ "config": cfg, "nodes": 3 }).to_string();
        assert_eq!(parse(&wrapped).unwrap(), cfg);
    }

    #[test]
    fn nested_missing_field_is_named() {
        let text = MINIMAL.replace(r#", "n_angular": 11"#, "");
        match parse(&text) {
            Err(CliError::Parse { field, .. }) => assert_eq!(field.as_deref(), Some("grid.n_angular")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let text = MINIMAL.replace(r#""schema_version": 1"#, r#""schema_version": 2"#);
        assert!(matches!(parse(&text), Err(CliError::Validation { ref field, .. }) if field == "schema_version"));
    }

    #[test]
    fn cross_block_dimensions_are_checked() {
        let mut cfg = parse(MINIMAL).unwrap();
        cfg.simulation.x = vec![1.0];
        assert!(matches!(cfg.validate(), Err(CliError::Validation { ref field, .. }) if field == "simulation.x"));
        let mut cfg = parse(MINIMAL).unwrap();
        cfg.simulation.policy = "greedy".into();
        assert!(matches!(cfg.validate(), Err(CliError::Validation { ref field, .. }) if field == "simulation.policy"));
    }
}
