//! JSON run configuration: navigable ids, training defaults, synth parameters.
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SynthConfig, DEFAULT_NAVIGABLE_IDS, MAX_LABEL_ID};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub navigable_ids: Vec<u8>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            navigable_ids: DEFAULT_NAVIGABLE_IDS.to_vec(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.navigable_ids.iter().find(|&&id| id > MAX_LABEL_ID) {
            return Err(Error::Config(format!("navigable id {id} outside 0..={MAX_LABEL_ID}")));
        }
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
