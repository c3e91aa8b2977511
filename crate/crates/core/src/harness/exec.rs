//! Runs a job's compile and test commands as local child processes.
//!
//! Every command runs under `/bin/sh -c` in its own process group so that a
//! timeout or an output overflow can take down the whole tree at once.
//! Stdout is read into a buffer that never grows past the output cap; the
//! moment a program writes one byte more, its process group is killed.

use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::{CompileStatus, JobReport, JobRequest, TestOutcome, TestStatus, KILL_GRACE};

const READ_CHUNK: usize = 64 * 1024;
/// Compile logs are for humans; keep them short.
const COMPILE_LOG_LIMIT: usize = 64 * 1024;
/// How long to wait for pipe readers after the child has been reaped.
const DRAIN_WAIT: Duration = Duration::from_secs(1);

/// Per-process resource limits applied with `setrlimit` before exec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecLimits {
    pub address_space_bytes: Option<u64>,
    pub file_size_bytes: Option<u64>,
    pub max_processes: Option<u64>,
    pub kill_grace: Duration,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            address_space_bytes: None,
            file_size_bytes: None,
            max_processes: None,
            kill_grace: KILL_GRACE,
        }
    }
}

#[derive(Debug, Default)]
struct Captured {
    bytes: Vec<u8>,
    overflowed: bool,
}

#[derive(Debug)]
struct ProcessRun {
    status: ExitStatus,
    stdout: Captured,
    stderr: Captured,
    timed_out: bool,
    wall: Duration,
}

fn kill_group(pgid: i32, signal: i32) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(-pgid, signal);
    }
}

/// Reads `pipe` into a buffer of at most `cap` bytes. With `kill_pgid` set,
/// overflowing kills that process group and stops reading; otherwise the
/// excess is drained and dropped.
fn spawn_capture<R: Read + Send + 'static>(
    mut pipe: R,
    cap: usize,
    kill_pgid: Option<i32>,
) -> mpsc::Receiver<Captured> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut out = Captured::default();
        let mut chunk = vec![0u8; READ_CHUNK];
        loop {
            let n = match pipe.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            };
            if out.overflowed {
                continue;
            }
            let room = cap - out.bytes.len();
            if n > room {
                out.bytes.extend_from_slice(&chunk[..room]);
                out.overflowed = true;
                if let Some(pgid) = kill_pgid {
                    kill_group(pgid, libc::SIGKILL);
                    break;
                }
            } else {
                out.bytes.extend_from_slice(&chunk[..n]);
            }
        }
        let _ = tx.send(out);
    });
    rx
}

fn apply_limits(limits: &ExecLimits) -> io::Result<()> {
    let set = |resource, value: u64| -> io::Result<()> {
        let lim = libc::rlimit {
            rlim_cur: value as libc::rlim_t,
            rlim_max: value as libc::rlim_t,
        };
        // SAFETY: setrlimit with a valid pointer to an initialized rlimit.
        if unsafe { libc::setrlimit(resource, &lim) } != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    };
    if let Some(v) = limits.address_space_bytes {
        set(libc::RLIMIT_AS, v)?;
    }
    if let Some(v) = limits.file_size_bytes {
        set(libc::RLIMIT_FSIZE, v)?;
    }
    if let Some(v) = limits.max_processes {
        set(libc::RLIMIT_NPROC, v)?;
    }
    set(libc::RLIMIT_CORE, 0)
}

/// Makes the job the first victim of the OOM killer rather than the agent.
/// Raising the score needs no privilege; failures are ignored.
fn prefer_oom_kill() {
    // SAFETY: open/write/close on a static path, async-signal-safe.
    unsafe {
        let fd = libc::open(c"/proc/self/oom_score_adj".as_ptr(), libc::O_WRONLY);
        if fd >= 0 {
            libc::write(fd, b"1000".as_ptr().cast(), 4);
            libc::close(fd);
        }
    }
}

fn run_process(
    command: &str,
    workdir: &Path,
    stdin: &[u8],
    timeout: Duration,
    cap: usize,
    limits: &ExecLimits,
) -> io::Result<ProcessRun> {
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c")
        .arg(command)
        .current_dir(workdir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let child_limits = *limits;
    // SAFETY: the closure only issues async-signal-safe syscalls.
    unsafe {
        cmd.pre_exec(move || {
            libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
            prefer_oom_kill();
            apply_limits(&child_limits)
        });
    }
    let started = Instant::now();
    let mut child = cmd.spawn()?;
    let pgid = child.id() as i32;

    let mut child_stdin = child.stdin.take().expect("stdin piped");
    let input = stdin.to_vec();
    thread::spawn(move || {
        // The program may exit without reading; EPIPE is expected then.
        let _ = child_stdin.write_all(&input);
    });
    let stdout_rx = spawn_capture(child.stdout.take().expect("stdout piped"), cap, Some(pgid));
    let stderr_rx = spawn_capture(child.stderr.take().expect("stderr piped"), cap, None);

    let (exit_tx, exit_rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = exit_tx.send(child.wait());
    });

    let mut timed_out = false;
    let status = match exit_rx.recv_timeout(timeout) {
        Ok(status) => status?,
        Err(_) => {
            timed_out = true;
            kill_group(pgid, libc::SIGTERM);
            match exit_rx.recv_timeout(limits.kill_grace) {
                Ok(status) => status?,
                Err(_) => {
                    kill_group(pgid, libc::SIGKILL);
                    exit_rx
                        .recv()
                        .map_err(|_| io::Error::other("waiter thread vanished"))??
                }
            }
        }
    };
    let wall = started.elapsed();
    // Background children of the program must not outlive the test.
    kill_group(pgid, libc::SIGKILL);

    let stdout = stdout_rx.recv_timeout(DRAIN_WAIT).unwrap_or_default();
    let stderr = stderr_rx.recv_timeout(DRAIN_WAIT).unwrap_or_default();
    Ok(ProcessRun {
        status,
        stdout,
        stderr,
        timed_out,
        wall,
    })
}

/// Removes everything inside `dir`, keeping `dir` itself (it may be a mount
/// point).
pub fn wipe_dir(dir: &Path) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let removed = remove_path(&path);
        if removed.is_err() {
            make_writable(&path);
            remove_path(&path)?;
        }
    }
    Ok(())
}

fn remove_path(path: &Path) -> io::Result<()> {
    let meta = fs::symlink_metadata(path)?;
    if meta.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    }
}

fn make_writable(path: &Path) {
    use std::os::unix::fs::PermissionsExt;
    if let Ok(meta) = fs::symlink_metadata(path) {
        if meta.file_type().is_symlink() {
            return;
        }
        let _ = fs::set_permissions(path, fs::Permissions::from_mode(0o700));
        if meta.is_dir() {
            if let Ok(entries) = fs::read_dir(path) {
                for e in entries.flatten() {
                    make_writable(&e.path());
                }
            }
        }
    }
}

/// Cuts `bytes` to at most `limit` bytes and decodes lossily.
fn prefix_text(bytes: &[u8], limit: usize) -> String {
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(limit)]);
    text.into_owned()
}

fn exit_code(status: &ExitStatus) -> Option<i32> {
    status.code()
}

fn describe_exit(status: &ExitStatus) -> String {
    match (status.code(), status.signal()) {
        (Some(code), _) => format!("exit code {code}"),
        (None, Some(sig)) => format!("killed by signal {sig}"),
        _ => "unknown exit".to_string(),
    }
}

fn write_program(workdir: &Path, request: &JobRequest) -> io::Result<PathBuf> {
    let path = workdir.join(&request.filename);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, request.program.as_bytes())?;
    Ok(path)
}

/// Executes `request` inside `workdir`. The directory is emptied before and
/// after the job.
pub fn run_job_local(workdir: &Path, request: &JobRequest, limits: &ExecLimits) -> JobReport {
    let report = run_job_inner(workdir, request, limits);
    if let Err(e) = wipe_dir(workdir) {
        tracing::warn!(error = %e, "failed to wipe working directory");
    }
    report
}

fn run_job_inner(workdir: &Path, request: &JobRequest, limits: &ExecLimits) -> JobReport {
    let cap = request.output_cap_bytes as usize;
    let mut report = JobReport::empty();

    if let Err(e) = wipe_dir(workdir).and_then(|_| write_program(workdir, request)) {
        // Treat an unwritable workdir like a broken toolchain: nothing runs.
        report.compile_status = CompileStatus::CompileError;
        report.compile_log_prefix = format!("cannot write program: {e}");
        return report;
    }

    if let Some(compile) = &request.compile {
        match run_process(
            compile,
            workdir,
            b"",
            request.compile_timeout,
            cap,
            limits,
        ) {
            Ok(run) => {
                let mut log = run.stdout.bytes;
                log.extend_from_slice(&run.stderr.bytes);
                report.compile_log_prefix = prefix_text(&log, COMPILE_LOG_LIMIT);
                report.compile_status = if run.timed_out {
                    CompileStatus::CompileTimeout
                } else if run.stdout.overflowed || !run.status.success() {
                    if !run.status.success() {
                        report
                            .compile_log_prefix
                            .push_str(&format!("\n[compiler {}]", describe_exit(&run.status)));
                    }
                    CompileStatus::CompileError
                } else {
                    CompileStatus::Ok
                };
            }
            Err(e) => {
                report.compile_status = CompileStatus::CompileError;
                report.compile_log_prefix = format!("cannot start compiler: {e}");
            }
        }
        if report.compile_status != CompileStatus::Ok {
            return report;
        }
    }

    // Reported prefixes share one budget per stream so a report stays near
    // the size of a single capture.
    let mut stdout_budget = cap;
    let mut stderr_budget = cap;
    let mut failed = false;
    for (index, test) in request.tests.iter().enumerate() {
        if failed && request.fail_fast {
            report.outcomes.push(TestOutcome {
                index,
                status: TestStatus::Skipped,
                exit_code: None,
                stdout_prefix: String::new(),
                stderr_prefix: String::new(),
                wall_time_ms: 0,
            });
            continue;
        }
        let outcome = match run_process(
            &request.execute,
            workdir,
            test.input.as_bytes(),
            request.test_timeout,
            cap,
            limits,
        ) {
            Ok(run) => {
                let actual = String::from_utf8_lossy(&run.stdout.bytes);
                let status = if run.stdout.overflowed {
                    TestStatus::OutputOverflow
                } else if run.timed_out {
                    TestStatus::Timeout
                } else if !run.status.success() {
                    TestStatus::RuntimeError
                } else if request.comparison.matches(&actual, &test.output) {
                    TestStatus::Passed
                } else {
                    TestStatus::WrongOutput
                };
                let stdout_prefix = prefix_text(&run.stdout.bytes, stdout_budget);
                let stderr_prefix = prefix_text(&run.stderr.bytes, stderr_budget);
                stdout_budget -= run.stdout.bytes.len().min(stdout_budget);
                stderr_budget -= run.stderr.bytes.len().min(stderr_budget);
                TestOutcome {
                    index,
                    status,
                    exit_code: exit_code(&run.status),
                    stdout_prefix,
                    stderr_prefix,
                    wall_time_ms: run.wall.as_millis() as u64,
                }
            }
            Err(e) => TestOutcome {
                index,
                status: TestStatus::RuntimeError,
                exit_code: None,
                stdout_prefix: String::new(),
                stderr_prefix: format!("cannot start program: {e}"),
                wall_time_ms: 0,
            },
        };
        failed |= outcome.status != TestStatus::Passed;
        report.outcomes.push(outcome);
    }
    report
}
