//! Unified run configuration: one JSON file drives simulate / train /
//! reconstruct / evaluate. The schema is strict — unknown keys are rejected
//! before any work happens — and `--set key=value` overrides are applied on
//! the JSON tree so an experiment is fully described by config plus
//! overrides.

use crate::backbone::ModelConfig;
use crate::data::DatasetParams;
use crate::error::{DmsmError, Result};
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    /// Number of reverse-diffusion paths.
    pub paths: usize,
    pub base_seed: u64,
    /// Keep per-path images in the output bundle.
    pub save_paths: bool,
    /// Skip the per-step measurement re-noising (ablation).
    pub clean_measurements: bool,
    /// Slice ids to reconstruct; empty means the whole test split.
    pub slices: Vec<String>,
    /// Acceleration of the masks used at inference.
    pub acceleration: f64,
    /// Checkpoint file; empty selects `<out_dir>/best.ckpt` then
    /// `<out_dir>/last.ckpt`.
    pub checkpoint: String,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            paths: 15,
            base_seed: 9000,
            save_paths: false,
            clean_measurements: false,
            slices: Vec::new(),
            acceleration: 4.0,
            checkpoint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Acceleration of the masks used for training measurements.
    pub acceleration: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { config: TrainConfig::default(), acceleration: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Restrict the uncertainty/error correlation to foreground pixels
    /// (reference magnitude above the threshold fraction of its max).
    pub use_foreground_mask: bool,
    pub foreground_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { use_foreground_mask: true, foreground_threshold: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory (created by `simulate`, read by the rest).
    pub dataset_dir: String,
    /// Output directory for training runs and reconstructions.
    pub out_dir: String,
    pub dataset: DatasetParams,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_dir: "data".into(),
            out_dir: "runs/default".into(),
            dataset: DatasetParams::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            inference: InferenceSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Strict parse: unknown keys anywhere in the tree are rejected.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes)
            .map_err(|e| DmsmError::Config(format!("config parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| DmsmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_bytes(&bytes)
    }

    /// Load with `--set dotted.key=json_value` overrides applied before the
    /// strict parse, so typos in override paths are rejected too.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree: serde_json::Value = match path {
            Some(p) => {
                let bytes = std::fs::read(p)
                    .map_err(|e| DmsmError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| DmsmError::Config(format!("config parse failed: {e}")))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for item in overrides {
            apply_override(&mut tree, item)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree)
            .map_err(|e| DmsmError::Config(format!("config validation failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.config.steps == 0 {
            return Err(DmsmError::Config("train.steps must be positive".into()));
        }
        if !(self.train.config.partition_rho > 0.0 && self.train.config.partition_rho < 1.0) {
            return Err(DmsmError::Config(format!(
                "train.partition_rho must lie in (0, 1), got {}",
                self.train.config.partition_rho
            )));
        }
        if self.inference.paths == 0 {
            return Err(DmsmError::Config("inference.paths must be at least 1".into()));
        }
        if !self
            .dataset
            .accelerations
            .iter()
            .any(|&r| (r - self.train.acceleration).abs() < 1e-9)
        {
            return Err(DmsmError::Config(format!(
                "train.acceleration {} is not among dataset.accelerations {:?}",
                self.train.acceleration, self.dataset.accelerations
            )));
        }
        if !self
            .dataset
            .accelerations
            .iter()
            .any(|&r| (r - self.inference.acceleration).abs() < 1e-9)
        {
            return Err(DmsmError::Config(format!(
                "inference.acceleration {} is not among dataset.accelerations {:?}",
                self.inference.acceleration, self.dataset.accelerations
            )));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Apply one `dotted.path=json_value` override to a JSON tree. The path must
/// address an existing object slot; values parse as JSON with a string
/// fallback for bare words.
fn apply_override(tree: &mut serde_json::Value, item: &str) -> Result<()> {
    let (path, raw_value) = item
        .split_once('=')
        .ok_or_else(|| DmsmError::Config(format!("override {item:?} is not key=value")))?;
    let value: serde_json::Value = match serde_json::from_str(raw_value) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw_value.to_string()),
    };
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            DmsmError::Config(format!("override path {path:?}: {part:?} is not an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("parts is nonempty")
}
