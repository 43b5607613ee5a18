//! JSON run configuration: market and pool parameters as flat keys plus
//! optional `constraint`, `solver` and `output` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dp::SolverConfig;
use crate::error::{Error, Result};
use crate::market::MarketParams;
use crate::portfolio::ConstraintSet;
use crate::pricing::PoolSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: PathBuf::from("out"), formats: vec![OutputFormat::Csv, OutputFormat::Json] }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub market: MarketParams,
    #[serde(flatten)]
    pub pool: PoolSpec,
    #[serde(default)]
    pub constraint: ConstraintSet,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses an already-assembled JSON value, for callers that patch keys first.
    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.pool.validate()?;
        self.solver.validate()?;
        if self.output.formats.is_empty() {
            return Err(Error::InvalidParam { name: "output.formats", reason: "at least one format required".into() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::IterationMethod;

    #[test]
    fn empty_object_is_table_defaults() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg.market, MarketParams::default());
        assert_eq!(cfg.pool, PoolSpec::default());
        assert_eq!(cfg.constraint, ConstraintSet::NoShort);
        assert_eq!(cfg.solver, SolverConfig::default());
    }

    #[test]
    fn flat_keys_and_sections() {
        let text = r#"{
            "muA": 0.001, "sigmaB": 0.02, "N": 2, "gamma": 1.0, "eta": 0.3, "f": 0.003,
            "constraint": "short_ok",
            "solver": { "grid_size": 41, "method": { "kind": "modified_policy", "evaluations": 200 } },
            "output": { "formats": ["json"] }
        }"#;
        let cfg = RunConfig::from_json_str(text).unwrap();
        assert_eq!(cfg.market.mu_a, 0.001);
        assert_eq!(cfg.market.sigma_b, 0.02);
        assert_eq!(cfg.market.n, 2);
        assert_eq!(cfg.pool.eta, 0.3);
        assert_eq!(cfg.pool.f.value(), 0.003);
        assert_eq!(cfg.constraint, ConstraintSet::ShortOk);
        assert_eq!(cfg.solver.grid_size, 41);
        assert_eq!(cfg.solver.tol, 1e-9);
        assert_eq!(cfg.solver.method, IterationMethod::ModifiedPolicy { evaluations: 200 });
        assert!(cfg.output.wants(OutputFormat::Json) && !cfg.output.wants(OutputFormat::Csv));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json_str(r#"{"f": -0.1}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"eta": 1.0}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"delta": 1.0}"#).is_err());
        let err = RunConfig::from_json_str("{\"muA\": 0.1,\n \"muB\": }").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json_str(&text).unwrap(), cfg);
    }
}
