use std::path::Path;

use serde::{Deserialize, Serialize};

use mhapool::encoder::EncoderConfig;
use mhapool::features::FeatureConfig;
use mhapool::head::HeadConfig;
use mhapool::model::ModelConfig;
use mhapool::pooling::PoolingConfig;
use mhapool::trainer::TrainConfig;
use mhapool::{Error, Result};

/// Settings file for `train`: TOML with `[features]`, `[encoder]`,
/// `[pooling]`, `[head]` and `[train]` tables. Missing keys take their
/// defaults; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::with_path(path, e.into()))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_config(&self, n_speakers: usize) -> ModelConfig {
        ModelConfig {
            features: self.features.clone(),
            encoder: self.encoder.clone(),
            pooling: self.pooling.clone(),
            head: self.head.clone(),
            n_speakers,
        }
    }

    /// Everything except the speaker count, which comes from the manifest.
    pub fn validate(&self) -> Result<()> {
        self.model_config(2).validate()?;
        self.train.validate()
    }
}
