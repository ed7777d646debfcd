//! The run configuration file (TOML). Every field has a default, so an empty
//! file is a valid configuration; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::keypoint::DetectorTrainConfig;
use crate::world::GenConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Scene generation ranges.
    pub generation: GenConfig,
    pub detector: DetectorTrainConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Synthetic dataset size and master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 0, n: 4096 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Record of the dataset whose condition is used.
    pub index: usize,
    pub seed: u64,
    /// Consistency guidance strength; 0 disables guidance.
    pub guidance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of validation records to sample.
    pub n: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n: 512, seed: 0 }
    }
}

/// Default locations, used when a command-line flag is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub val: PathBuf,
    pub detector: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data/train".into(),
            val: "data/val".into(),
            detector: "runs/detector".into(),
            checkpoint: "runs/train/checkpoint.ecnt".into(),
            out: "runs/out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Config(format!("line {line}: {}", e.message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.sample.guidance >= 0.0 && self.sample.guidance.is_finite()) {
            return Err(Error::Config("sample.guidance must be finite and >= 0".into()));
        }
        if self.detector.batch_size == 0 {
            return Err(Error::Config("detector.batch_size must be positive".into()));
        }
        Ok(())
    }
}
