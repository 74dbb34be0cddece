//! Run configuration: a flat TOML document with dotted keys such as
//! `train.epochs = 200`. Values resolve as flags, then `--set` overrides,
//! then the file, then built-in defaults.

use std::path::{Path, PathBuf};

use branchdiff::denoiser::Architecture;
use branchdiff::diffusion::ProcessSpec;
use branchdiff::hierarchy::DiscoveryConfig;
use branchdiff::sampling::SampleConfig;
use branchdiff::training::{LossWeighting, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "BRANCHDIFF_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub hierarchy: Option<PathBuf>,
    pub data: DataSection,
    pub process: ProcessSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub discover: DiscoverSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub label_col: String,
    /// IDX label file; when set, `path` is read as IDX images.
    pub idx_labels: Option<PathBuf>,
    pub downscale: usize,
    pub standardize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            label_col: "class".into(),
            idx_labels: None,
            downscale: 1,
            standardize: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    Continuous,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessSection {
    pub kind: ProcessKind,
    pub beta_min: f64,
    pub beta_slope: f64,
    pub horizon: f64,
    pub beta_base: f64,
    pub beta_step: f64,
    pub steps: usize,
}

impl Default for ProcessSection {
    fn default() -> Self {
        let ProcessSpec::Continuous {
            beta_min,
            beta_slope,
            horizon,
        } = ProcessSpec::default()
        else {
            unreachable!()
        };
        let ProcessSpec::Discrete {
            beta_base,
            beta_step,
            steps,
        } = ProcessSpec::discrete_default()
        else {
            unreachable!()
        };
        Self {
            kind: ProcessKind::Continuous,
            beta_min,
            beta_slope,
            horizon,
            beta_base,
            beta_step,
            steps,
        }
    }
}

impl ProcessSection {
    pub fn spec(&self) -> ProcessSpec {
        match self.kind {
            ProcessKind::Continuous => ProcessSpec::Continuous {
                beta_min: self.beta_min,
                beta_slope: self.beta_slope,
                horizon: self.horizon,
            },
            ProcessKind::Discrete => ProcessSpec::Discrete {
                beta_base: self.beta_base,
                beta_step: self.beta_step,
                steps: self.steps,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub trunk_layers: usize,
    pub head_layers: usize,
    pub time_frequencies: usize,
    pub label_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            width: a.width,
            trunk_layers: a.trunk_layers,
            head_layers: a.head_layers,
            time_frequencies: a.time_frequencies,
            label_dim: a.label_dim,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            width: self.width,
            trunk_layers: self.trunk_layers,
            head_layers: self.head_layers,
            time_frequencies: self.time_frequencies,
            label_dim: self.label_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub t_floor: f64,
    pub weighting: LossWeighting,
    pub timing: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            t_floor: t.t_floor,
            weighting: t.weighting,
            timing: t.timing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
    pub steps: usize,
    pub snr: f64,
    pub batch_size: usize,
    pub corrector: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        let s = SampleConfig::default();
        Self {
            n: 1000,
            steps: s.steps,
            snr: s.snr,
            batch_size: s.batch_size,
            corrector: s.corrector,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverSection {
    pub n: usize,
    pub eps: f64,
    pub grid_points: usize,
    pub smoothing_sigma: f64,
    pub smoothing_truncate: f64,
}

impl Default for DiscoverSection {
    fn default() -> Self {
        let d = DiscoveryConfig::default();
        Self {
            n: d.n,
            eps: d.epsilon,
            grid_points: d.grid_points,
            smoothing_sigma: d.smoothing_sigma,
            smoothing_truncate: d.smoothing_truncate,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            seed: self.seed,
            t_floor: self.train.t_floor,
            weighting: self.train.weighting,
            start_epoch: 0,
            timing: self.train.timing,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.sample.steps,
            snr: self.sample.snr,
            seed: self.seed,
            batch_size: self.sample.batch_size,
            corrector: self.sample.corrector,
        }
    }

    pub fn discovery_config(&self) -> DiscoveryConfig {
        DiscoveryConfig {
            n: self.discover.n,
            grid_points: self.discover.grid_points,
            epsilon: self.discover.eps,
            smoothing_sigma: self.discover.smoothing_sigma,
            smoothing_truncate: self.discover.smoothing_truncate,
        }
    }

    /// Resolves the configuration from an optional file and ordered
    /// overrides; later overrides win.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> CliResult<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::input(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::input(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, value.clone())?;
        }
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::input(format!("config: {}", e.message())))
    }
}

/// Inserts `value` at a dotted path, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::input(format!("bad config key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::input(format!("config key {p} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a `key=value` override. The value is read as a TOML literal and
/// falls back to a plain string.
pub fn parse_override(s: &str) -> CliResult<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::input(format!("override {s:?} is not key=value")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}
