//! Warm sandbox pool: image build and cache, spawning, liveness, crash
//! recovery, retirement, and checkout/give-back of containers.
//!
//! Two drivers sit behind [`SandboxDriver`]: [`OciCliDriver`] shells out to
//! an OCI runtime CLI (docker or podman), and [`ProcessDriver`] runs the
//! agent directly on the host inside fresh namespaces and cgroups when the
//! host allows it, or with plain rlimits otherwise.

mod driver;
mod image;
mod oci;
mod pool;
mod process;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use driver::{ContainerProcess, SandboxDriver, SpawnedContainer};
pub use image::ImageCache;
pub use oci::{find_runtime, OciCliDriver};
pub use pool::{
    ContainerHandle, ContainerInfo, LanguageMetrics, Pool, PoolMetrics, ReturnVerdict,
};
pub use process::{AgentCommand, Isolation, ProcessDriver};

pub const DEFAULT_MAX_JOBS_PER_CONTAINER: u64 = 500;
pub const DEFAULT_SPAWN_TIMEOUT: Duration = Duration::from_secs(60);
/// Twice the default test timeout.
pub const DEFAULT_HEARTBEAT_DEADLINE: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("image build for {tag} failed:\n{log_tail}")]
    BuildError { tag: String, log_tail: String },
    #[error("spawning a container failed: {0}")]
    SpawnFailed(String),
    #[error("no container for {language} became available within {waited:?}")]
    SpawnTimeout { language: String, waited: Duration },
    #[error("pool is stopped")]
    PoolStopped,
    #[error("no pool is running for language `{0}`")]
    UnknownLanguage(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Enabled,
    #[default]
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceLimits {
    pub cpu_cores: f64,
    pub memory_bytes: u64,
    pub max_processes: u64,
    pub network: Network,
    /// Size of the RAM disk mounted at the working directory.
    pub writable_fs_bytes: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self {
            cpu_cores: 2.0,
            memory_bytes: 2 << 30,
            max_processes: 256,
            network: Network::Disabled,
            writable_fs_bytes: 256 << 20,
        }
    }
}

impl ResourceLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        let bad = |what: &str| Err(SandboxError::InvalidConfig(format!("{what} must be positive")));
        if !(self.cpu_cores.is_finite() && self.cpu_cores > 0.0) {
            return bad("cpu_cores");
        }
        if self.memory_bytes == 0 {
            return bad("memory_bytes");
        }
        if self.max_processes == 0 {
            return bad("max_processes");
        }
        if self.writable_fs_bytes == 0 {
            return bad("writable_fs_bytes");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerState {
    Building,
    Warm,
    Busy,
    Crashed,
    Retired,
}

impl ContainerState {
    /// Allowed moves: building→warm→busy→(warm|crashed)→retired. A container
    /// may also crash while warm or during startup.
    pub fn can_transition_to(self, next: ContainerState) -> bool {
        use ContainerState::*;
        matches!(
            (self, next),
            (Building, Warm)
                | (Building, Crashed)
                | (Warm, Busy)
                | (Warm, Crashed)
                | (Warm, Retired)
                | (Busy, Warm)
                | (Busy, Crashed)
                | (Busy, Retired)
                | (Crashed, Retired)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub target_size_per_language: usize,
    /// `None` means containers are never retired for age.
    pub max_jobs_per_container: Option<u64>,
    #[serde(rename = "spawn_timeout_ms", with = "crate::harness::millis")]
    pub spawn_timeout: Duration,
    /// A warm container silent for this long is treated as crashed.
    #[serde(rename = "heartbeat_deadline_ms", with = "crate::harness::millis")]
    pub heartbeat_deadline: Duration,
    pub limits: ResourceLimits,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            target_size_per_language: 4,
            max_jobs_per_container: Some(DEFAULT_MAX_JOBS_PER_CONTAINER),
            spawn_timeout: DEFAULT_SPAWN_TIMEOUT,
            heartbeat_deadline: DEFAULT_HEARTBEAT_DEADLINE,
            limits: ResourceLimits::default(),
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.target_size_per_language == 0 {
            return Err(SandboxError::InvalidConfig(
                "target_size_per_language must be at least 1".into(),
            ));
        }
        if self.max_jobs_per_container == Some(0) {
            return Err(SandboxError::InvalidConfig(
                "max_jobs_per_container must be positive".into(),
            ));
        }
        if self.spawn_timeout.is_zero() || self.heartbeat_deadline.is_zero() {
            return Err(SandboxError::InvalidConfig("timeouts must be positive".into()));
        }
        self.limits.validate()
    }
}
