use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use quantile_rules::data::FeatureSpec;

/// Run configuration. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub mine: MineSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub adapt: Option<AdaptSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    #[serde(default = "default_label")]
    pub label_column: String,
    #[serde(default = "default_prediction")]
    pub prediction_column: String,
    #[serde(default)]
    pub features: Vec<FeatureSpec>,
}

fn default_label() -> String {
    "label".into()
}

fn default_prediction() -> String {
    "prediction".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub model_out: PathBuf,
    pub features: Vec<String>,
    #[serde(default = "default_train_iterations")]
    pub iterations: usize,
    #[serde(default = "default_train_lr")]
    pub learning_rate: f64,
}

fn default_train_iterations() -> usize {
    500
}

fn default_train_lr() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineSection {
    #[serde(default = "default_rules")]
    pub rules_out: PathBuf,
    /// Model whose predictions are added to train and valid before mining.
    pub model: Option<PathBuf>,
    #[serde(default = "default_train_batches")]
    pub train_batches: usize,
    #[serde(default = "default_valid_batches")]
    pub valid_batches: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub select: bool,
}

impl Default for MineSection {
    fn default() -> Self {
        MineSection {
            rules_out: default_rules(),
            model: None,
            train_batches: default_train_batches(),
            valid_batches: default_valid_batches(),
            epsilon: default_epsilon(),
            seed: 0,
            select: true,
        }
    }
}

fn default_rules() -> PathBuf {
    "rules.jsonl".into()
}

fn default_train_batches() -> usize {
    200
}

fn default_valid_batches() -> usize {
    50
}

fn default_epsilon() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub rules: Option<PathBuf>,
    #[serde(default = "default_report")]
    pub report_out: PathBuf,
    /// Model whose predictions are added to the test set before evaluating.
    pub model: Option<PathBuf>,
    #[serde(default = "default_valid_batches")]
    pub batches: usize,
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            rules: None,
            report_out: default_report(),
            model: None,
            batches: default_valid_batches(),
            batch_size: None,
            seed: 0,
            seeds: Vec::new(),
        }
    }
}

fn default_report() -> PathBuf {
    "report.json".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub model_in: PathBuf,
    #[serde(default = "default_model_out")]
    pub model_out: PathBuf,
    #[serde(default = "default_trace")]
    pub trace_out: PathBuf,
    #[serde(default = "default_before")]
    pub report_before: PathBuf,
    #[serde(default = "default_after")]
    pub report_after: PathBuf,
    pub iterations: Option<usize>,
    /// Passes over the test set; converted to iterations when `iterations`
    /// is absent.
    pub epochs: Option<usize>,
    #[serde(default = "default_adapt_batch")]
    pub batch_size: usize,
    #[serde(default = "default_adapt_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    pub grad_clip: Option<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_model_out() -> PathBuf {
    "model.adapted.json".into()
}

fn default_trace() -> PathBuf {
    "trace.csv".into()
}

fn default_before() -> PathBuf {
    "report.before.json".into()
}

fn default_after() -> PathBuf {
    "report.after.json".into()
}

fn default_adapt_batch() -> usize {
    64
}

fn default_adapt_lr() -> f64 {
    1e-2
}

fn default_temperature() -> f64 {
    1.0
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| anyhow::Error::new(ConfigError(format!("{}: {}", path.display(), e.message()))))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [&mut d.train, &mut d.valid, &mut d.test, &mut d.schema].into_iter().flatten() {
            fix(p);
        }
        if let Some(t) = &mut self.train {
            fix(&mut t.model_out);
        }
        fix(&mut self.mine.rules_out);
        if let Some(m) = &mut self.mine.model {
            fix(m);
        }
        let e = &mut self.evaluate;
        fix(&mut e.report_out);
        for p in [&mut e.rules, &mut e.model].into_iter().flatten() {
            fix(p);
        }
        if let Some(a) = &mut self.adapt {
            for p in [
                &mut a.model_in,
                &mut a.model_out,
                &mut a.trace_out,
                &mut a.report_before,
                &mut a.report_after,
            ] {
                fix(p);
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let m = &self.mine;
        if !(m.epsilon > 0.0 && m.epsilon < 1.0) {
            bail!(ConfigError(format!("mine.epsilon must lie in (0, 1), got {}", m.epsilon)));
        }
        if m.train_batches == 0 || m.valid_batches == 0 {
            bail!(ConfigError("mine batch counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rules_path(&self) -> &Path {
        self.evaluate.rules.as_deref().unwrap_or(&self.mine.rules_out)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.mine.seed = seed;
        self.evaluate.seed = seed;
        if let Some(a) = &mut self.adapt {
            a.seed = seed;
        }
    }
}

/// Invalid configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => bail!(ConfigError(format!("missing `{key}`"))),
    }
}
