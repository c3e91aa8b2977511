//! Service configuration, read from TOML.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use polyjudge_core::llm::EndpointConfig;
use polyjudge_core::sandbox::PoolConfig;
use polyjudge_core::verifier::VerifyOptions;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::DriverKind;

pub const DEFAULT_LISTEN_ADDRESS: &str = "127.0.0.1:8080";
pub const DEFAULT_QUEUE_BOUND: usize = 1024;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen_address")]
    pub listen_address: String,
    /// Language configuration files. Relative paths resolve against the
    /// directory of the service configuration.
    pub languages: Vec<PathBuf>,
    #[serde(default)]
    pub driver: DriverKind,
    /// Binary copied into images and started as the in-container agent.
    /// Defaults to this executable, which doubles as the agent.
    #[serde(default)]
    pub agent_binary: Option<PathBuf>,
    /// Candidates allowed to wait beyond those that can run at once.
    #[serde(default = "default_queue_bound")]
    pub queue_bound: usize,
    #[serde(default)]
    pub pool: PoolConfig,
    /// Defaults for verification requests, which may override any field.
    #[serde(default)]
    pub verify: VerifyOptions,
    #[serde(default)]
    pub eval: EvalDefaults,
    #[serde(default)]
    pub training: TrainingDefaults,
    /// Generation and reformulation endpoint.
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
}

fn default_listen_address() -> String {
    DEFAULT_LISTEN_ADDRESS.to_string()
}

fn default_queue_bound() -> usize {
    DEFAULT_QUEUE_BOUND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalDefaults {
    pub samples: u64,
    pub temperature: f64,
    pub k: Vec<u64>,
    pub include_prefix: bool,
}

impl Default for EvalDefaults {
    fn default() -> Self {
        Self {
            samples: 20,
            temperature: 0.2,
            k: vec![1],
            include_prefix: true,
        }
    }
}

/// Trainer hyperparameters, carried for trainers that read them from here.
/// The service itself never trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingDefaults {
    pub learning_rate: f64,
    pub lr_schedule: String,
    pub prompts_per_batch: u32,
    pub group_size: u32,
    pub temperature: f64,
    pub clip_epsilon: f64,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        Self {
            learning_rate: 5e-6,
            lr_schedule: "cosine".into(),
            prompts_per_batch: 4,
            group_size: 32,
            temperature: 0.7,
            clip_epsilon: polyjudge_core::rlmath::DEFAULT_CLIP_EPSILON,
        }
    }
}

impl ServiceConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: ServiceConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: "<config>".into(),
            source,
        })?;
        for path in &mut config.languages {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.languages.is_empty() {
            return Err(ConfigError::Invalid("at least one language is required".into()));
        }
        self.socket_addr()?;
        self.pool
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        validate_eval(self.eval.samples, &self.eval.k).map_err(ConfigError::Invalid)?;
        if !(self.eval.temperature >= 0.0) {
            return Err(ConfigError::Invalid("eval.temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn socket_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen_address.parse().map_err(|_| {
            ConfigError::Invalid(format!(
                "listen_address `{}` is not host:port",
                self.listen_address
            ))
        })
    }
}

/// `n >= k >= 1` for every requested k.
pub fn validate_eval(samples: u64, ks: &[u64]) -> Result<(), String> {
    if samples == 0 {
        return Err("samples must be at least 1".into());
    }
    if ks.is_empty() {
        return Err("at least one k is required".into());
    }
    match ks.iter().find(|&&k| k == 0 || k > samples) {
        Some(k) => Err(format!("k={k} must satisfy 1 <= k <= samples={samples}")),
        None => Ok(()),
    }
}
