//! Experiment configuration files.

use std::path::{Path, PathBuf};

use cgnet::model::ModelSpec;
use cgnet::perf::ArrayConfig;
use cgnet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSource;
use crate::error::{CliError, Result};

pub const CONFIG_SCHEMA: &str = "cgnet.experiment/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_groups() -> Vec<usize> {
    vec![8, 4, 2, 1]
}

fn default_tau_sweep() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.2]
}

fn default_intensity_samples() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Group counts for the partial/final-sum correlation (`eta = 1/G`).
    #[serde(default = "default_groups")]
    pub correlation_groups: Vec<usize>,
    /// Channel-gate fractions for the weight-access sweep.
    #[serde(default = "default_tau_sweep")]
    pub tau_c_sweep: Vec<f64>,
    /// Validation samples that get intensity maps.
    #[serde(default = "default_intensity_samples")]
    pub intensity_samples: usize,
    /// Caps the samples used by analyze and perf; all when absent.
    #[serde(default)]
    pub max_samples: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            correlation_groups: default_groups(),
            tau_c_sweep: default_tau_sweep(),
            intensity_samples: default_intensity_samples(),
            max_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: Precision,
    pub dataset: DatasetSource,
    /// Held-out set; when absent `val_fraction` of `dataset` is split off.
    #[serde(default)]
    pub validation: Option<DatasetSource>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub array: ArrayConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Checkpoint of the distillation teacher.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            field: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.rebase(base);
        if let Some(v) = &mut cfg.validation {
            v.rebase(base);
        }
        for p in [&mut cfg.output_dir, &mut cfg.teacher].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let err = |field: &str, msg: String| CliError::Config {
            path: path.to_path_buf(),
            field: field.into(),
            msg,
        };
        if self.schema != CONFIG_SCHEMA {
            return Err(err("schema", format!("expected \"{CONFIG_SCHEMA}\", got \"{}\"", self.schema)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(err("val_fraction", "must lie in [0, 1)".into()));
        }
        self.model.resolve().map_err(|e| err("model", e.to_string()))?;
        self.train.loss.validate().map_err(|e| err("train.loss", e.to_string()))?;
        self.train.schedule.validate().map_err(|e| err("train.schedule", e.to_string()))?;
        if self.analysis.correlation_groups.contains(&0) {
            return Err(err("analysis.correlation_groups", "group counts must be positive".into()));
        }
        if self.analysis.tau_c_sweep.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(err("analysis.tau_c_sweep", "fractions must lie in [0, 1]".into()));
        }
        if self.train.loss.kd.enabled && self.teacher.is_none() {
            return Err(err("teacher", "distillation is enabled but no teacher checkpoint is given".into()));
        }
        if self.array.rows == 0 || self.array.cols == 0 {
            return Err(err("array", "rows and cols must be positive".into()));
        }
        Ok(())
    }
}
