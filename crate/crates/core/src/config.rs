//! One JSON document describing a whole experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::dsd::DsdConfig;
use crate::error::{MeltError, Result};
use crate::ratr::RatrConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.6, validation: 0.1, test: 0.3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding the three banks and the manifest.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub ratr: RatrConfig,
    pub dsd: DsdConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| MeltError::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.ratr.validate(self.synth.q)?;
        self.dsd.validate()?;
        self.train.validate()?;
        let s = &self.split;
        if [s.train, s.validation, s.test].iter().any(|f| !(*f >= 0.0)) || (s.train + s.validation + s.test - 1.0).abs() > 1e-9 {
            return Err(MeltError::config("split fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Applies a seed override to both the generator and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// SHA-256 of the document with keys in sorted order.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}
