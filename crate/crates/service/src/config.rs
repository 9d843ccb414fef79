use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Scripted,
    Model,
}

/// Model-provider settings. The API key never lives here; it is read from
/// `MODEL_API_KEY` at startup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub backend: Backend,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    2
}

fn default_max_concurrency() -> usize {
    4
}

impl ProviderConfig {
    pub fn scripted() -> Self {
        ProviderConfig {
            backend: Backend::Scripted,
            endpoint: None,
            model_name: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            max_concurrency: default_max_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.backend {
            Backend::Scripted if self.endpoint.is_some() => {
                Err(ConfigError::Invalid("the scripted backend must not set an endpoint".into()))
            }
            Backend::Model if self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) => {
                Err(ConfigError::Invalid("the model backend needs an endpoint".into()))
            }
            Backend::Model if self.model_name.as_deref().is_none_or(|m| m.trim().is_empty()) => {
                Err(ConfigError::Invalid("the model backend needs a model_name".into()))
            }
            _ if self.max_concurrency == 0 => Err(ConfigError::Invalid("max_concurrency must be at least 1".into())),
            _ if self.timeout_ms == 0 => Err(ConfigError::Invalid("timeout_ms must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        let cfg: ProviderConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {0}: {1}")]
    Io(String, String),
}
