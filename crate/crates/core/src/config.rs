//! Versioned run configuration. The bundled defaults live in
//! `config/default.toml`; a file passed on the command line replaces them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Architecture, TrainConfig};
use crate::harness::{ExperimentConfig, HarnessError, Scheme};
use crate::task::TaskSpec;

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config version {0} is not supported (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error(transparent)]
    Scheme(#[from] HarnessError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub seeds: u64,
    pub master_seed: u64,
    pub schemes: Vec<String>,
    pub rate_weight: f64,
    pub lambda_grid: Vec<f64>,
    pub task: TaskSpec,
    pub arch: Architecture,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        if config.version != CONFIG_VERSION {
            return Err(ConfigError::Version(config.version));
        }
        config.schemes()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn schemes(&self) -> Result<Vec<Scheme>, HarnessError> {
        self.schemes.iter().map(|s| s.parse()).collect()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds).collect()
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            task: self.task,
            arch: self.arch,
            train: self.train,
            rate_weight: self.rate_weight,
            master_seed: self.master_seed,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("bundled config is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::DEFAULT_RATE_WEIGHT;

    #[test]
    fn bundled_defaults_match_code_defaults() {
        let c = Config::default();
        assert_eq!(c.task, TaskSpec::default());
        assert_eq!(c.arch, Architecture::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.rate_weight, DEFAULT_RATE_WEIGHT);
        assert_eq!(c.schemes().unwrap(), Scheme::ALL.to_vec());
        assert_eq!(c.seed_list(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn rejects_unknown_version_and_scheme() {
        let text = DEFAULT_CONFIG.replace("version = 1", "version = 7");
        assert!(matches!(
            Config::from_toml(&text),
            Err(ConfigError::Version(7))
        ));
        let text = DEFAULT_CONFIG.replace("\"dense\",", "\"federated\",");
        assert!(matches!(
            Config::from_toml(&text),
            Err(ConfigError::Scheme(_))
        ));
    }
}
