use std::path::PathBuf;

use crate::harness::AgentConnection;
use crate::langconfig::ImageBuildPlan;

use super::{ResourceLimits, SandboxError};

/// A started sandbox as seen from the host.
pub trait ContainerProcess: Send {
    /// Pid of the host process backing the sandbox, if any.
    fn host_pid(&self) -> Option<u32>;
    fn has_exited(&mut self) -> bool;
    /// Stops the sandbox and releases its resources. Idempotent.
    fn kill(&mut self);
}

pub struct SpawnedContainer {
    pub connection: AgentConnection,
    pub process: Box<dyn ContainerProcess>,
    /// Agent working directory, as a path inside the sandbox.
    pub ram_disk_path: PathBuf,
}

pub trait SandboxDriver: Send + Sync {
    fn name(&self) -> &'static str;

    /// Builds the image for `plan` unless it is already cached; returns the
    /// tag to spawn from.
    fn ensure_image(&self, plan: &ImageBuildPlan) -> Result<String, SandboxError>;

    /// Starts one sandbox running the agent. The returned connection has not
    /// yet been checked for readiness.
    fn spawn(
        &self,
        image: &str,
        id: &str,
        limits: &ResourceLimits,
    ) -> Result<SpawnedContainer, SandboxError>;
}
