//! Driver for an OCI runtime reached through its command line.

use std::fs;
use std::io::Read;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use crate::harness::AgentConnection;
use crate::langconfig::{ImageBuildPlan, CONTAINER_WORKDIR};

use super::driver::{ContainerProcess, SandboxDriver, SpawnedContainer};
use super::image::ImageCache;
use super::{Network, ResourceLimits, SandboxError};

const LOG_TAIL_LINES: usize = 40;

/// Locates a runtime CLI: `$POLYJUDGE_RUNTIME`, then `docker`, then `podman`
/// on `PATH`.
pub fn find_runtime() -> Option<PathBuf> {
    if let Some(explicit) = std::env::var_os("POLYJUDGE_RUNTIME") {
        return Some(PathBuf::from(explicit));
    }
    let path = std::env::var_os("PATH")?;
    ["docker", "podman"].iter().find_map(|name| {
        std::env::split_paths(&path)
            .map(|dir| dir.join(name))
            .find(|candidate| candidate.is_file())
    })
}

#[derive(Debug)]
pub struct OciCliDriver {
    runtime: PathBuf,
    agent_binary: PathBuf,
    cache: ImageCache,
}

impl OciCliDriver {
    /// `agent_binary` is copied into every image as the entrypoint.
    pub fn new(runtime: impl Into<PathBuf>, agent_binary: impl Into<PathBuf>) -> Self {
        Self {
            runtime: runtime.into(),
            agent_binary: agent_binary.into(),
            cache: ImageCache::default(),
        }
    }

    /// Finds a runtime and checks that it answers `version`.
    pub fn detect(agent_binary: impl Into<PathBuf>) -> Result<Self, SandboxError> {
        let runtime = find_runtime()
            .ok_or_else(|| SandboxError::RuntimeUnavailable("no docker or podman on PATH".into()))?;
        let status = Command::new(&runtime)
            .arg("version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| SandboxError::RuntimeUnavailable(format!("{}: {e}", runtime.display())))?;
        if !status.success() {
            return Err(SandboxError::RuntimeUnavailable(format!(
                "`{} version` exited with {status}",
                runtime.display()
            )));
        }
        Ok(Self::new(runtime, agent_binary))
    }

    pub fn runtime(&self) -> &Path {
        &self.runtime
    }

    fn command(&self) -> Command {
        Command::new(&self.runtime)
    }

    fn unavailable(&self, e: std::io::Error) -> SandboxError {
        SandboxError::RuntimeUnavailable(format!("{}: {e}", self.runtime.display()))
    }

    fn image_exists(&self, tag: &str) -> Result<bool, SandboxError> {
        let status = self
            .command()
            .args(["image", "inspect", tag])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| self.unavailable(e))?;
        Ok(status.success())
    }

    fn build(&self, plan: &ImageBuildPlan) -> Result<(), SandboxError> {
        let context = std::env::temp_dir().join(format!(
            "polyjudge-build-{}-{}",
            std::process::id(),
            plan.tag.rsplit(':').next().unwrap_or("image")
        ));
        let result = self.build_in(plan, &context);
        let _ = fs::remove_dir_all(&context);
        result
    }

    fn build_in(&self, plan: &ImageBuildPlan, context: &Path) -> Result<(), SandboxError> {
        let io_err = |what: &str, e: std::io::Error| SandboxError::BuildError {
            tag: plan.tag.clone(),
            log_tail: format!("{what}: {e}"),
        };
        fs::create_dir_all(context).map_err(|e| io_err("creating build context", e))?;
        let containerfile = context.join("Containerfile");
        fs::write(&containerfile, plan.containerfile())
            .map_err(|e| io_err("writing Containerfile", e))?;
        let agent = context.join("polyjudge-agent");
        fs::copy(&self.agent_binary, &agent).map_err(|e| io_err("copying agent binary", e))?;
        fs::set_permissions(&agent, fs::Permissions::from_mode(0o755))
            .map_err(|e| io_err("chmod agent", e))?;

        let log_path = context.join("build.log");
        let log = fs::File::create(&log_path).map_err(|e| io_err("creating build log", e))?;
        let log_err = log.try_clone().map_err(|e| io_err("creating build log", e))?;
        let status = self
            .command()
            .arg("build")
            .arg("-t")
            .arg(&plan.tag)
            .arg("-f")
            .arg(&containerfile)
            .arg(context)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .status()
            .map_err(|e| self.unavailable(e))?;
        if status.success() {
            tracing::info!(tag = %plan.tag, "image built");
            return Ok(());
        }
        let mut text = String::new();
        let _ = fs::File::open(&log_path).and_then(|mut f| f.read_to_string(&mut text));
        Err(SandboxError::BuildError {
            tag: plan.tag.clone(),
            log_tail: tail_lines(&text, LOG_TAIL_LINES),
        })
    }
}

fn tail_lines(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

impl SandboxDriver for OciCliDriver {
    fn name(&self) -> &'static str {
        "oci"
    }

    fn ensure_image(&self, plan: &ImageBuildPlan) -> Result<String, SandboxError> {
        self.cache.get_or_build(&plan.tag, || {
            if self.image_exists(&plan.tag)? {
                tracing::debug!(tag = %plan.tag, "image already present");
                return Ok(());
            }
            self.build(plan)
        })
    }

    fn spawn(
        &self,
        image: &str,
        id: &str,
        limits: &ResourceLimits,
    ) -> Result<SpawnedContainer, SandboxError> {
        let mut cmd = self.command();
        cmd.args(["run", "-i", "--rm", "--name", id])
            .arg("--network")
            .arg(match limits.network {
                Network::Disabled => "none",
                Network::Enabled => "bridge",
            })
            .arg(format!("--memory={}", limits.memory_bytes))
            .arg(format!("--memory-swap={}", limits.memory_bytes))
            .arg(format!("--cpus={}", limits.cpu_cores))
            .arg(format!("--pids-limit={}", limits.max_processes))
            .arg("--tmpfs")
            .arg(format!(
                "{CONTAINER_WORKDIR}:rw,exec,nosuid,mode=1777,size={}",
                limits.writable_fs_bytes
            ))
            .args(["--cap-drop", "ALL", "--security-opt", "no-new-privileges"])
            .arg(image)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        let mut child = cmd.spawn().map_err(|e| self.unavailable(e))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        Ok(SpawnedContainer {
            connection: AgentConnection::new(stdout, stdin),
            process: Box::new(OciContainer {
                child,
                runtime: self.runtime.clone(),
                name: id.to_string(),
                killed: false,
            }),
            ram_disk_path: PathBuf::from(CONTAINER_WORKDIR),
        })
    }
}

struct OciContainer {
    child: Child,
    runtime: PathBuf,
    name: String,
    killed: bool,
}

impl ContainerProcess for OciContainer {
    fn host_pid(&self) -> Option<u32> {
        Some(self.child.id())
    }

    fn has_exited(&mut self) -> bool {
        !matches!(self.child.try_wait(), Ok(None))
    }

    fn kill(&mut self) {
        if self.killed {
            return;
        }
        self.killed = true;
        // Killing the CLI client alone can leave the container running.
        let _ = Command::new(&self.runtime)
            .args(["kill", &self.name])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for OciContainer {
    fn drop(&mut self) {
        self.kill();
    }
}
