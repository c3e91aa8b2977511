//! Choosing a sandbox driver.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use polyjudge_core::sandbox::{
    AgentCommand, OciCliDriver, ProcessDriver, SandboxDriver, SandboxError,
};
use serde::{Deserialize, Serialize};

/// Argument that switches this executable into agent mode.
pub const AGENT_SUBCOMMAND: &str = "agent";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DriverKind {
    /// An OCI runtime if one answers, otherwise host processes.
    #[default]
    Auto,
    Oci,
    Process,
}

/// The agent to launch: an explicit binary, or this executable in agent mode.
fn agent_command(agent_binary: Option<&Path>) -> Result<(PathBuf, AgentCommand), SandboxError> {
    match agent_binary {
        Some(path) => Ok((path.to_path_buf(), AgentCommand::new(path))),
        None => {
            let exe = std::env::current_exe().map_err(|e| {
                SandboxError::RuntimeUnavailable(format!("cannot locate own executable: {e}"))
            })?;
            let command = AgentCommand::new(&exe).with_args([AGENT_SUBCOMMAND]);
            Ok((exe, command))
        }
    }
}

pub fn make_driver(
    kind: DriverKind,
    agent_binary: Option<&Path>,
) -> Result<Arc<dyn SandboxDriver>, SandboxError> {
    let (binary, command) = agent_command(agent_binary)?;
    match kind {
        DriverKind::Oci => Ok(Arc::new(OciCliDriver::detect(binary)?)),
        DriverKind::Process => Ok(Arc::new(ProcessDriver::detect(command))),
        DriverKind::Auto => match OciCliDriver::detect(binary) {
            Ok(driver) => Ok(Arc::new(driver)),
            Err(e) => {
                tracing::info!(reason = %e, "no container runtime, running jobs as host processes");
                Ok(Arc::new(ProcessDriver::detect(command)))
            }
        },
    }
}
