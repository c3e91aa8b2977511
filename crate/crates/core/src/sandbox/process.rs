//! Container-free driver: the agent runs as a host subprocess.
//!
//! With root and cgroups available each agent gets private mount, network,
//! IPC and UTS namespaces, a tmpfs working directory, and its own memory,
//! pids and cpu cgroup. Otherwise it falls back to rlimits and a working
//! directory under `/dev/shm`. Either way the toolchains come from the host.

use std::ffi::CString;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::harness::AgentConnection;
use crate::langconfig::ImageBuildPlan;

use super::driver::{ContainerProcess, SandboxDriver, SpawnedContainer};
use super::image::ImageCache;
use super::{Network, ResourceLimits, SandboxError};

const CGROUP_ROOT: &str = "/sys/fs/cgroup";
const CGROUP_GROUP: &str = "polyjudge";
const CPU_PERIOD_US: u64 = 100_000;

/// How the agent program is launched: the binary plus leading arguments
/// (e.g. a subcommand) placed before the agent flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl AgentCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn with_args<I: IntoIterator<Item = S>, S: Into<String>>(mut self, args: I) -> Self {
        self.args.extend(args.into_iter().map(Into::into));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Isolation {
    /// Namespaces, tmpfs working directory, cgroup limits.
    Namespaces,
    /// Per-job rlimits only.
    Rlimits,
}

impl Isolation {
    /// Picks the strongest isolation this host supports.
    pub fn probe() -> Isolation {
        // SAFETY: geteuid has no preconditions.
        if unsafe { libc::geteuid() } != 0 || cgroup_layout().is_none() {
            return Isolation::Rlimits;
        }
        let mut cmd = Command::new("/bin/sh");
        cmd.args(["-c", "exit 0"])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        // SAFETY: unshare and mount are async-signal-safe syscalls.
        unsafe {
            cmd.pre_exec(|| {
                if libc::unshare(libc::CLONE_NEWNS | libc::CLONE_NEWNET) != 0 {
                    return Err(io::Error::last_os_error());
                }
                if libc::mount(
                    std::ptr::null(),
                    c"/".as_ptr(),
                    std::ptr::null(),
                    libc::MS_REC | libc::MS_PRIVATE,
                    std::ptr::null(),
                ) != 0
                {
                    return Err(io::Error::last_os_error());
                }
                Ok(())
            });
        }
        match cmd.status() {
            Ok(s) if s.success() => Isolation::Namespaces,
            _ => Isolation::Rlimits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CgroupLayout {
    V1,
    V2,
}

fn cgroup_layout() -> Option<CgroupLayout> {
    let root = Path::new(CGROUP_ROOT);
    if root.join("cgroup.controllers").exists() {
        Some(CgroupLayout::V2)
    } else if root.join("memory").join("memory.limit_in_bytes").exists() {
        Some(CgroupLayout::V1)
    } else {
        None
    }
}

#[derive(Debug)]
struct Cgroup {
    dirs: Vec<PathBuf>,
}

impl Cgroup {
    fn create(id: &str, limits: &ResourceLimits) -> io::Result<Cgroup> {
        let quota = ((limits.cpu_cores * CPU_PERIOD_US as f64).round() as u64).max(1000);
        let mut group = Cgroup { dirs: Vec::new() };
        match cgroup_layout() {
            Some(CgroupLayout::V1) => {
                let memory = group.make_dir(&Path::new(CGROUP_ROOT).join("memory"), id)?;
                fs::write(memory.join("memory.limit_in_bytes"), limits.memory_bytes.to_string())?;
                // Only present when swap accounting is enabled.
                let _ = fs::write(
                    memory.join("memory.memsw.limit_in_bytes"),
                    limits.memory_bytes.to_string(),
                );
                let pids_root = Path::new(CGROUP_ROOT).join("pids");
                if pids_root.exists() {
                    let pids = group.make_dir(&pids_root, id)?;
                    fs::write(pids.join("pids.max"), limits.max_processes.to_string())?;
                }
                let cpu_root = Path::new(CGROUP_ROOT).join("cpu");
                if cpu_root.join("cpu.cfs_quota_us").exists() {
                    let cpu = group.make_dir(&cpu_root, id)?;
                    fs::write(cpu.join("cpu.cfs_period_us"), CPU_PERIOD_US.to_string())?;
                    fs::write(cpu.join("cpu.cfs_quota_us"), quota.to_string())?;
                }
            }
            Some(CgroupLayout::V2) => {
                let root = Path::new(CGROUP_ROOT);
                let _ = fs::write(root.join("cgroup.subtree_control"), "+memory +pids +cpu");
                let parent = root.join(CGROUP_GROUP);
                fs::create_dir_all(&parent)?;
                let _ = fs::write(parent.join("cgroup.subtree_control"), "+memory +pids +cpu");
                let dir = parent.join(id);
                fs::create_dir_all(&dir)?;
                group.dirs.push(dir.clone());
                fs::write(dir.join("memory.max"), limits.memory_bytes.to_string())?;
                let _ = fs::write(dir.join("memory.swap.max"), "0");
                let _ = fs::write(dir.join("pids.max"), limits.max_processes.to_string());
                let _ = fs::write(dir.join("cpu.max"), format!("{quota} {CPU_PERIOD_US}"));
            }
            None => return Err(io::Error::other("no usable cgroup hierarchy")),
        }
        Ok(group)
    }

    fn make_dir(&mut self, controller_root: &Path, id: &str) -> io::Result<PathBuf> {
        let dir = controller_root.join(CGROUP_GROUP).join(id);
        fs::create_dir_all(&dir)?;
        self.dirs.push(dir.clone());
        Ok(dir)
    }

    fn add(&self, pid: u32) -> io::Result<()> {
        for dir in &self.dirs {
            fs::write(dir.join("cgroup.procs"), pid.to_string())?;
        }
        Ok(())
    }

    /// Kills every remaining member and removes the groups.
    fn destroy(&self) {
        for _ in 0..100 {
            for dir in &self.dirs {
                if let Ok(procs) = fs::read_to_string(dir.join("cgroup.procs")) {
                    for pid in procs.lines().filter_map(|l| l.trim().parse::<i32>().ok()) {
                        // SAFETY: plain kill(2).
                        unsafe { libc::kill(pid, libc::SIGKILL) };
                    }
                }
            }
            let all_removed = self
                .dirs
                .iter()
                .all(|d| !d.exists() || fs::remove_dir(d).is_ok());
            if all_removed {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        tracing::warn!(dirs = ?self.dirs, "cgroup cleanup incomplete");
    }
}

#[derive(Debug)]
pub struct ProcessDriver {
    agent: AgentCommand,
    isolation: Isolation,
    root: PathBuf,
    agent_stderr: bool,
    images: ImageCache,
}

impl ProcessDriver {
    pub fn new(agent: AgentCommand, isolation: Isolation) -> Self {
        let root = match isolation {
            Isolation::Namespaces => std::env::temp_dir(),
            Isolation::Rlimits if Path::new("/dev/shm").is_dir() => PathBuf::from("/dev/shm"),
            Isolation::Rlimits => std::env::temp_dir(),
        }
        .join(format!("polyjudge-{}", std::process::id()));
        Self {
            agent,
            isolation,
            root,
            agent_stderr: false,
            images: ImageCache::default(),
        }
    }

    /// Uses the strongest isolation the host supports.
    pub fn detect(agent: AgentCommand) -> Self {
        Self::new(agent, Isolation::probe())
    }

    /// Lets agent stderr through to ours, for debugging.
    pub fn with_agent_stderr(mut self, inherit: bool) -> Self {
        self.agent_stderr = inherit;
        self
    }

    pub fn isolation(&self) -> Isolation {
        self.isolation
    }

    fn agent_command(&self, workdir: &Path, limits: &ResourceLimits) -> Command {
        let mut cmd = Command::new(&self.agent.program);
        cmd.args(&self.agent.args)
            .arg("--workdir")
            .arg(workdir)
            .arg("--rlimit-fsize")
            .arg(limits.writable_fs_bytes.to_string());
        if self.isolation == Isolation::Rlimits {
            cmd.arg("--rlimit-as")
                .arg(limits.memory_bytes.to_string())
                .arg("--rlimit-nproc")
                .arg(limits.max_processes.to_string());
        }
        cmd.stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(if self.agent_stderr {
                Stdio::inherit()
            } else {
                Stdio::null()
            })
            .process_group(0);
        cmd
    }
}

impl Drop for ProcessDriver {
    fn drop(&mut self) {
        let _ = fs::remove_dir(&self.root);
    }
}

fn spawn_failed(what: &str, e: impl std::fmt::Display) -> SandboxError {
    SandboxError::SpawnFailed(format!("{what}: {e}"))
}

impl SandboxDriver for ProcessDriver {
    fn name(&self) -> &'static str {
        "process"
    }

    /// There is nothing to build: jobs use the host's toolchains.
    fn ensure_image(&self, plan: &ImageBuildPlan) -> Result<String, SandboxError> {
        let host_tag = format!("host:{}", plan.tag);
        self.images.get_or_build(&host_tag, || {
            tracing::info!(
                tag = %plan.tag,
                "process driver runs on the host; install steps are not executed"
            );
            Ok(())
        })
    }

    fn spawn(
        &self,
        _image: &str,
        id: &str,
        limits: &ResourceLimits,
    ) -> Result<SpawnedContainer, SandboxError> {
        let workdir = self.root.join(id);
        fs::create_dir_all(&workdir).map_err(|e| spawn_failed("creating workdir", e))?;
        let _ = fs::set_permissions(&workdir, fs::Permissions::from_mode(0o1777));
        let mut cmd = self.agent_command(&workdir, limits);

        let cgroup = if self.isolation == Isolation::Namespaces {
            let target = CString::new(workdir.as_os_str().as_bytes())
                .map_err(|e| spawn_failed("workdir path", e))?;
            let options = CString::new(format!("size={},mode=1777", limits.writable_fs_bytes))
                .expect("no interior nul");
            let mut flags = libc::CLONE_NEWNS | libc::CLONE_NEWIPC | libc::CLONE_NEWUTS;
            if limits.network == Network::Disabled {
                flags |= libc::CLONE_NEWNET;
            }
            // SAFETY: only async-signal-safe syscalls on memory prepared
            // before the fork.
            unsafe {
                cmd.pre_exec(move || {
                    if libc::unshare(flags) != 0 {
                        return Err(io::Error::last_os_error());
                    }
                    if libc::mount(
                        std::ptr::null(),
                        c"/".as_ptr(),
                        std::ptr::null(),
                        libc::MS_REC | libc::MS_PRIVATE,
                        std::ptr::null(),
                    ) != 0
                    {
                        return Err(io::Error::last_os_error());
                    }
                    if libc::mount(
                        c"tmpfs".as_ptr(),
                        target.as_ptr(),
                        c"tmpfs".as_ptr(),
                        libc::MS_NOSUID | libc::MS_NODEV,
                        options.as_ptr().cast(),
                    ) != 0
                    {
                        return Err(io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
            Some(Cgroup::create(id, limits).map_err(|e| spawn_failed("creating cgroup", e))?)
        } else {
            None
        };

        let mut child = match cmd.spawn() {
            Ok(child) => child,
            Err(e) => {
                if let Some(cg) = &cgroup {
                    cg.destroy();
                }
                let _ = fs::remove_dir_all(&workdir);
                return Err(spawn_failed(&format!("{}", self.agent.program.display()), e));
            }
        };
        if let Some(cg) = &cgroup {
            if let Err(e) = cg.add(child.id()) {
                let _ = child.kill();
                let _ = child.wait();
                cg.destroy();
                let _ = fs::remove_dir_all(&workdir);
                return Err(spawn_failed("joining cgroup", e));
            }
        }
        // Jobs raise their own score, so under memory pressure the agent is
        // the last process in the sandbox to be killed.
        let _ = fs::write(format!("/proc/{}/oom_score_adj", child.id()), "-1000");

        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        Ok(SpawnedContainer {
            connection: AgentConnection::new(stdout, stdin),
            process: Box::new(ProcessContainer {
                child,
                cgroup,
                workdir: workdir.clone(),
                killed: false,
            }),
            ram_disk_path: workdir,
        })
    }
}

struct ProcessContainer {
    child: Child,
    cgroup: Option<Cgroup>,
    workdir: PathBuf,
    killed: bool,
}

impl ContainerProcess for ProcessContainer {
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
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(cg) = &self.cgroup {
            cg.destroy();
        }
        let _ = fs::remove_dir_all(&self.workdir);
    }
}

impl Drop for ProcessContainer {
    fn drop(&mut self) {
        self.kill();
    }
}
