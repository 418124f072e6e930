//! Run configuration: a sectioned key-value file with `[geometry]`,
//! `[timing]`, `[fault]`, and `[controller]` tables. Every key has a
//! default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fault::FaultConfig;
use crate::flash::Geometry;
use crate::timing::TimingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Maximum outstanding requests accepted from a live host.
    pub queue_depth: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { queue_depth: 256 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub geometry: Geometry,
    pub timing: TimingConfig,
    pub fault: FaultConfig,
    pub controller: ControllerConfig,
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geometry.validate().map_err(ConfigError::Invalid)?;
        self.timing.validate().map_err(ConfigError::Invalid)?;
        self.fault.validate().map_err(ConfigError::Invalid)?;
        if self.controller.queue_depth == 0 {
            return Err(ConfigError::Invalid("queue_depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
