//! TOML run configuration shared by every command.

use std::path::Path;

use retclip_core::data::SyntheticCohortConfig;
use retclip_core::eval::AdaptConfig;
use retclip_core::model::ModelConfig;
use retclip_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every key has a default and unknown keys are rejected. The root `seed`
/// overrides the section seeds when a command resolves the config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: AdaptConfig,
    pub synth: SyntheticCohortConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Loads `path` if given, then applies the root seed override and
    /// propagates the root seed into every section.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.synth.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("[train]\nlearning_rate = 1.0").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::parse("seed = 4\n[train]\nbatch_size = 8\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.model, ModelConfig::default());
    }
}
