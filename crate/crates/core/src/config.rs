//! Run configuration: one TOML document with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::multitask::MultiTaskConfig;
use crate::scene_synth::SceneConfig;
use crate::separation::SeparationConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Overlay opacity of rendered heatmaps.
    pub heatmap_alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            heatmap_alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialisation, shuffling and negative sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub encoder: EncoderConfig,
    pub multitask: MultiTaskConfig,
    pub alignment: AlignmentConfig,
    pub separation: SeparationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.encoder.validate()?;
        self.multitask.validate()?;
        self.alignment.validate()?;
        self.separation.validate()?;
        self.train.validate()?;
        if self.eval.batch_size == 0 || !(0.0..=1.0).contains(&self.eval.heatmap_alpha) {
            return Err(Error::config("eval batch_size must be positive and heatmap_alpha in [0, 1]"));
        }
        Ok(())
    }

    /// Seeds every random stream from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scene.seed = seed;
        self.separation.seed = seed;
        self
    }
}
