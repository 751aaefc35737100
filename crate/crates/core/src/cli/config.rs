use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{AccuracyMetric, WordBasis};
use crate::scenario::{ScenarioConfig, ScenarioKind};

fn default_intensity() -> f64 {
    400.0
}
fn default_meter() -> String {
    "none".into()
}
fn default_output_dir() -> PathBuf {
    "reports".into()
}
fn default_power_period_ms() -> u64 {
    100
}
fn default_memory_period_ms() -> u64 {
    50
}
fn default_accuracy() -> AccuracyMetric {
    AccuracyMetric::Bleu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub test: PathBuf,
    #[serde(default)]
    pub train: Option<PathBuf>,
}

/// One scenario entry; `seed` falls back to the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub poisson_mean: Option<f64>,
    #[serde(default)]
    pub instance_count: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ScenarioEntry {
    pub fn resolve(&self, run_seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            kind: self.kind,
            batch_size: self.batch_size,
            poisson_mean: self.poisson_mean,
            instance_count: self.instance_count,
            seed: self.seed.unwrap_or(run_seed),
        }
    }
}

/// Run configuration file. Relative paths resolve against the file's
/// directory. Command-line flags override the corresponding keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub datasets: DatasetPaths,
    pub scenarios: Vec<ScenarioEntry>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_intensity")]
    pub intensity_g_per_kwh: f64,
    /// `none`, `replay:<csv>`, `synthetic:<profile>` or `rapl[:<zone>]`.
    #[serde(default = "default_meter")]
    pub meter: String,
    /// Overrides the idle baseline stored in the session state file.
    #[serde(default)]
    pub idle_watts: Option<f64>,
    #[serde(default)]
    pub state_file: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_accuracy")]
    pub accuracy_metric: AccuracyMetric,
    /// `output` (default) or `input`: which text words/s counts.
    #[serde(default)]
    pub word_basis: WordBasis,
    #[serde(default)]
    pub lock_path: Option<PathBuf>,
    #[serde(default)]
    pub queue_timeout_s: Option<f64>,
    #[serde(default)]
    pub warmup_batches: usize,
    #[serde(default = "default_power_period_ms")]
    pub power_period_ms: u64,
    #[serde(default = "default_memory_period_ms")]
    pub memory_period_ms: u64,
    /// Target mean input length for the offline sample; defaults to the
    /// test set's mean.
    #[serde(default)]
    pub offline_target_len: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&body)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.datasets.test);
        if let Some(t) = self.datasets.train.as_mut() {
            fix(t);
        }
        fix(&mut self.output_dir);
        if let Some(s) = self.state_file.as_mut() {
            fix(s);
        }
        if let Some(l) = self.lock_path.as_mut() {
            fix(l);
        }
        if let crate::metering::MeterSpec::Replay(p) =
            self.meter.parse().unwrap_or(crate::metering::MeterSpec::None)
        {
            if p.is_relative() {
                self.meter = format!("replay:{}", base.join(p).display());
            }
        }
    }

    /// Checks everything that can be checked without touching the model.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scenarios.is_empty() {
            return Err(ConfigError("no scenarios configured".into()));
        }
        for entry in &self.scenarios {
            entry
                .resolve(self.seed)
                .validate()
                .map_err(|e| ConfigError(e.to_string()))?;
            if entry.kind == ScenarioKind::Offline && self.datasets.train.is_none() {
                return Err(ConfigError(
                    "the offline scenario needs a training dataset (datasets.train)".into(),
                ));
            }
        }
        if !(self.intensity_g_per_kwh > 0.0 && self.intensity_g_per_kwh.is_finite()) {
            return Err(ConfigError("intensity_g_per_kwh must be positive".into()));
        }
        if let Some(w) = self.idle_watts {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(ConfigError("idle_watts must be non-negative".into()));
            }
        }
        if self.power_period_ms == 0 || self.memory_period_ms == 0 {
            return Err(ConfigError("sampling periods must be positive".into()));
        }
        self.meter
            .parse::<crate::metering::MeterSpec>()
            .map_err(ConfigError)?;
        Ok(())
    }
}

/// Idle baseline persisted between invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub idle_watts: f64,
    pub meter: String,
    pub duration_s: f64,
    pub measured_at: String,
}

pub const STATE_FILE_ENV: &str = "INFERMARK_STATE";

pub fn default_state_file() -> PathBuf {
    std::env::var_os(STATE_FILE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("infermark-session.json"))
}

impl SessionState {
    pub fn load(path: &Path) -> Option<Self> {
        let body = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&body).ok()
    }

    pub fn store(&self, path: &Path) -> std::io::Result<()> {
        let body = serde_json::to_vec_pretty(self).expect("state serializes");
        super::write_atomic(path, &body)
    }
}
