use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use epistemic_core::backend::{ContextPolicy, HttpBackendConfig};
use epistemic_core::experiments::{
    BenchmarkConfig, CalibrationConfig, ConvergenceConfig, CoverageConfig, MissingMassConfig,
};
use epistemic_core::scores::ScoringConfig;
use epistemic_core::Response;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Http,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub http: HttpBackendConfig,
    /// JSON list of oracle entries answering the dataset queries.
    pub oracle: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmplifyConfig {
    pub query: String,
    pub target: String,
    pub repeated: String,
    pub t_values: Vec<usize>,
    /// Synthetic backend only.
    pub responses: Vec<Response>,
    pub policy: ContextPolicy,
}

impl Default for AmplifyConfig {
    fn default() -> Self {
        Self {
            query: "What is the capital of the UK?".into(),
            target: "London".into(),
            repeated: "Paris".into(),
            t_values: (0..=20).collect(),
            responses: vec![Response::new("London", 0.8), Response::new("Paris", 0.2)],
            policy: ContextPolicy::Accumulating { rate: 0.2 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub d: usize,
    /// Logit of the query row over the repeated row.
    pub gap: f64,
    pub t_values: Vec<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d: 4,
            gap: 3.0,
            t_values: vec![1, 2, 5, 10, 20, 50, 100, 200, 500, 1000],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// JSON-lines file of `{query, answers, tag}`; the synthetic mixed
    /// benchmark is used when absent.
    pub path: Option<PathBuf>,
}

/// Everything a run needs. Loaded from TOML, then patched by `--grid` and
/// the other flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub svg: bool,
    pub backend: BackendConfig,
    pub convergence: ConvergenceConfig,
    pub missing_mass: MissingMassConfig,
    pub coverage: CoverageConfig,
    pub dataset: DatasetConfig,
    pub benchmark: BenchmarkConfig,
    pub scoring: ScoringConfig,
    pub calibration: CalibrationConfig,
    pub amplify: AmplifyConfig,
    pub attention: AttentionConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Set `a.b.c = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!("grid override {assignment:?} is not of the form key=value");
    };
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("grid override {assignment:?} has an empty key");
    }
    let (last, parents) = keys.split_last().unwrap();
    let mut cur = table;
    for key in parents {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("grid override {assignment:?}: {key} is not a table"),
        };
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        Ok(cfg)
    }

    /// Push the master seed into every experiment section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        let seed = seed.or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        self.convergence.seed = seed;
        self.missing_mass.seed = seed;
        self.coverage.seed = seed;
        self.benchmark.seed = seed;
        self.scoring.seed = seed;
        self.calibration.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.convergence;
        if c.ns.is_empty() || c.temps.is_empty() || c.ks.is_empty() {
            bail!("convergence grid must be nonempty");
        }
        if self.missing_mass.ks.is_empty() {
            bail!("missing_mass.ks must be nonempty");
        }
        if self.amplify.t_values.is_empty() || self.attention.t_values.is_empty() {
            bail!("t_values must be nonempty");
        }
        if self.calibration.repetitions == 0 {
            bail!("calibration.repetitions must be >= 1");
        }
        Ok(())
    }
}
