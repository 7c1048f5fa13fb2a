//! TOML configuration schema.
//!
//! One file describes the market (`model`, `rate`, `drift`, `vol`) and,
//! optionally, the claim (`payoff`), the Monte Carlo run (`run`) and the
//! output location (`output`). Unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSection,
    pub rate: RateSection,
    pub drift: DriftSpec,
    pub vol: VolSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<PayoffSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    #[serde(default = "default_true")]
    pub positive_x0: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub table: Vec<RateEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateEntry {
    pub t_start: f64,
    pub value: f64,
}

/// Drift `b(t, x)` families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftSpec {
    /// `b(x) = values`
    Constant {
        values: Vec<f64>,
    },
    /// `b(x) = offset + slope x`
    Affine {
        offset: Vec<f64>,
        slope: Vec<Vec<f64>>,
    },
    /// `b_i(x) = coeffs_i x_i`
    LinearInState {
        coeffs: Vec<f64>,
    },
    /// `b_i(t, x) = coeffs_i(t) x_i`, piecewise constant in time
    TimeDependentLinear {
        segments: Vec<DriftSegment>,
    },
    Expression {
        exprs: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSegment {
    pub t_start: f64,
    pub coeffs: Vec<f64>,
}

/// Volatility `sigma(t, x)` families, `n x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VolSpec {
    Constant {
        matrix: Vec<Vec<f64>>,
    },
    /// `sigma_ij(x) = offset_ij + sum_l slope_ijl x_l`
    Affine {
        offset: Vec<Vec<f64>>,
        slope: Vec<Vec<Vec<f64>>>,
    },
    /// `sigma_ij(x) = matrix_ij x_i`
    LinearInState {
        matrix: Vec<Vec<f64>>,
    },
    TimeDependentLinear {
        segments: Vec<VolSegment>,
    },
    Expression {
        exprs: Vec<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolSegment {
    pub t_start: f64,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    EuropeanCall,
    AsianFloatingCall,
    Exchange,
    LookbackFloating,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffSection {
    pub kind: PayoffKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strike: Option<f64>,
    /// one-based asset indices
    #[serde(default)]
    pub assets: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Polynomial,
    #[default]
    PayoffAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSection {
    #[serde(default)]
    pub basis: BasisKind,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// linear-spline knots per coordinate (0 = pure polynomial)
    #[serde(default)]
    pub knots: usize,
}

impl Default for RegressionSection {
    fn default() -> Self {
        Self {
            basis: BasisKind::default(),
            degree: default_degree(),
            ridge: default_ridge(),
            knots: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeasureChoice {
    #[default]
    Q,
    P,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backtest_seed: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_arbitrage_tol")]
    pub arbitrage_tol: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_export_states")]
    pub export_states: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_replication_error: Option<f64>,
    #[serde(default)]
    pub backtest_measure: MeasureChoice,
    #[serde(default)]
    pub regression: RegressionSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
    #[default]
    Both,
}

impl OutputFormat {
    pub fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: String,
    #[serde(default)]
    pub formats: OutputFormat,
}

fn default_true() -> bool {
    true
}
fn default_degree() -> usize {
    2
}
fn default_ridge() -> f64 {
    1e-8
}
fn default_workers() -> usize {
    1
}
fn default_arbitrage_tol() -> f64 {
    1e-8
}
fn default_rank_tol() -> f64 {
    crate::linalg::DEFAULT_RANK_TOL
}
fn default_probes() -> usize {
    64
}
fn default_export_states() -> usize {
    16
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(e.to_string()))
    }

    /// The config as JSON without the settings that cannot change results:
    /// the output section and the worker count.
    pub fn resolved_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
            if let Some(run) = obj.get_mut("run").and_then(|r| r.as_object_mut()) {
                run.remove("workers");
            }
        }
        v
    }

    /// Hex SHA-256 of [`ConfigFile::resolved_json`].
    pub fn config_hash(&self) -> String {
        sha256_json(&self.resolved_json())
    }

    /// Hex SHA-256 of the market sections only.
    pub fn model_hash(&self) -> String {
        sha256_json(&(&self.model, &self.rate, &self.drift, &self.vol))
    }

    pub fn run(&self) -> Result<&RunSection> {
        self.run
            .as_ref()
            .ok_or_else(|| Error::Schema("missing [run] section".into()))
    }

    pub fn payoff(&self) -> Result<&PayoffSection> {
        self.payoff
            .as_ref()
            .ok_or_else(|| Error::Schema("missing [payoff] section".into()))
    }
}

impl RunSection {
    pub fn validate(&self) -> Result<()> {
        if self.paths < 100 {
            return Err(Error::Schema(format!("run.paths must be >= 100, got {}", self.paths)));
        }
        if self.steps < 4 {
            return Err(Error::Schema(format!("run.steps must be >= 4, got {}", self.steps)));
        }
        if self.workers == 0 {
            return Err(Error::Schema("run.workers must be >= 1".into()));
        }
        if !(self.arbitrage_tol > 0.0) || !(self.rank_tol > 0.0) {
            return Err(Error::Schema("tolerances must be positive".into()));
        }
        if self.probes == 0 {
            return Err(Error::Schema("run.probes must be >= 1".into()));
        }
        let r = &self.regression;
        if r.degree > 6 {
            return Err(Error::Schema(format!(
                "regression degree must be <= 6, got {}",
                r.degree
            )));
        }
        if !(r.ridge >= 0.0) {
            return Err(Error::Schema("regression ridge must be >= 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GBM: &str = r#"
[model]
n = 1
d = 1
horizon = 1.0
x0 = [100.0]

[rate]
table = [{ t_start = 0.0, value = 0.03 }]

[drift]
family = "linear-in-state"
params = { coeffs = [0.08] }

[vol]
family = "linear-in-state"
params = { matrix = [[0.2]] }

[payoff]
kind = "european_call"
strike = 100.0
assets = [1]

[run]
paths = 1000
steps = 16
seed = 7

[run.regression]
degree = 3
"#;

    #[test]
    fn parses_full_file() {
        let c = ConfigFile::from_toml(GBM).unwrap();
        assert_eq!(c.model.n, 1);
        assert_eq!(c.drift, DriftSpec::LinearInState { coeffs: vec![0.08] });
        let run = c.run().unwrap();
        assert_eq!(run.regression.degree, 3);
        assert_eq!(run.regression.basis, BasisKind::PayoffAware);
        run.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = GBM.replace("x0 = [100.0]", "x0 = [100.0]\nvolatility = 3");
        assert!(matches!(ConfigFile::from_toml(&bad), Err(Error::Schema(_))));
        let bad = GBM.replace("{ coeffs = [0.08] }", "{ coeffs = [0.08], extra = 1 }");
        assert!(matches!(ConfigFile::from_toml(&bad), Err(Error::Schema(_))));
        let bad = GBM.replace(
            "family = \"linear-in-state\"\nparams = { coeffs",
            "family = \"cubic\"\nparams = { coeffs",
        );
        assert!(matches!(ConfigFile::from_toml(&bad), Err(Error::Schema(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = ConfigFile::from_toml(GBM).unwrap();
        let text = c.to_toml().unwrap();
        let again = ConfigFile::from_toml(&text).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.config_hash(), again.config_hash());
        let mut other = c.clone();
        other.run.as_mut().unwrap().workers = 7;
        other.output = None;
        assert_eq!(c.config_hash(), other.config_hash());
        other.run.as_mut().unwrap().seed += 1;
        assert_ne!(c.config_hash(), other.config_hash());
    }

    #[test]
    fn run_invariants() {
        let mut c = ConfigFile::from_toml(GBM).unwrap();
        let run = c.run.as_mut().unwrap();
        run.paths = 50;
        assert!(run.validate().is_err());
        run.paths = 100;
        run.steps = 3;
        assert!(run.validate().is_err());
        run.steps = 4;
        run.regression.degree = 7;
        assert!(run.validate().is_err());
    }
}
