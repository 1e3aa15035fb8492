//! Run configuration: one TOML file covering simulation, ranker, trainer
//! and evaluation settings. Unknown keys are rejected; command-line flags
//! override file values and the resolved configuration is written next to
//! every command's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::RankerConfig;
use crate::scene::SceneConfig;
use crate::selectors::EvTrainConfig;
use crate::trainer::{RelevanceMetric, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n: usize,
    pub seed: u64,
    /// Directory of talker recordings; synthetic speech when unset.
    pub speech_dir: Option<PathBuf>,
    pub noise_dir: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 1,
            speech_dir: None,
            noise_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    /// Also write per-utterance scores as CSV.
    pub csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 3, csv: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Interpretation of manifest relevance values.
    pub relevance_metric: RelevanceMetric,
    pub simulate: SimulateConfig,
    pub scene: SceneConfig,
    pub ranker: RankerConfig,
    pub trainer: TrainConfig,
    pub ev: EvTrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.ranker.validate()?;
        self.trainer.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltr::Strategy;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c = RunConfig::from_toml("[trainer]\nstrategy = \"ranknet\"\nepochs = 3\n").unwrap();
        assert_eq!(c.trainer.strategy, Strategy::Ranknet);
        assert_eq!(c.trainer.epochs, 3);
        assert_eq!(c.ranker, RankerConfig::default());
        assert!(RunConfig::from_toml("[trainer]\nstratgy = \"ranknet\"\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[trainer]\nstrategy = \"nope\"\n").is_err());
    }
}
