//! The agent loop: reads job frames from stdin and answers on stdout.
//!
//! A heartbeat frame goes out when the agent starts and after every idle
//! heartbeat interval. Bytes of an incomplete frame that stall for longer
//! than the stall timeout are discarded with a `bad_frame` error, so one
//! truncated write cannot wedge the stream.

use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::exec::{run_job_local, ExecLimits};
use super::protocol::{decode_body, write_frame, Frame, FrameBuffer, MAX_FRAME_BYTES};
use super::HEARTBEAT_INTERVAL;

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub workdir: PathBuf,
    pub heartbeat_interval: Duration,
    pub stall_timeout: Duration,
    pub max_frame_bytes: usize,
    pub limits: ExecLimits,
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from(crate::langconfig::CONTAINER_WORKDIR),
            heartbeat_interval: HEARTBEAT_INTERVAL,
            stall_timeout: Duration::from_secs(1),
            max_frame_bytes: MAX_FRAME_BYTES,
            limits: ExecLimits::default(),
        }
    }
}

pub const AGENT_USAGE: &str = "usage: polyjudge-agent [--workdir DIR] [--heartbeat-ms N] \
[--stall-ms N] [--rlimit-as BYTES] [--rlimit-fsize BYTES] [--rlimit-nproc N] [--kill-grace-ms N]";

impl AgentOptions {
    /// Parses the agent's command-line flags.
    pub fn from_args<I: IntoIterator<Item = String>>(args: I) -> Result<Self, String> {
        let mut options = Self::default();
        let mut args = args.into_iter();
        while let Some(flag) = args.next() {
            let mut value = || {
                args.next()
                    .ok_or_else(|| format!("{flag} needs a value\n{AGENT_USAGE}"))
            };
            let number = |v: String| {
                v.parse::<u64>()
                    .map_err(|_| format!("{flag}: `{v}` is not a number"))
            };
            match flag.as_str() {
                "--workdir" => options.workdir = PathBuf::from(value()?),
                "--heartbeat-ms" => {
                    options.heartbeat_interval = Duration::from_millis(number(value()?)?)
                }
                "--stall-ms" => options.stall_timeout = Duration::from_millis(number(value()?)?),
                "--kill-grace-ms" => {
                    options.limits.kill_grace = Duration::from_millis(number(value()?)?)
                }
                "--rlimit-as" => options.limits.address_space_bytes = Some(number(value()?)?),
                "--rlimit-fsize" => options.limits.file_size_bytes = Some(number(value()?)?),
                "--rlimit-nproc" => options.limits.max_processes = Some(number(value()?)?),
                "-h" | "--help" => return Err(AGENT_USAGE.to_string()),
                other => return Err(format!("unknown flag `{other}`\n{AGENT_USAGE}")),
            }
        }
        Ok(options)
    }
}

fn handle_body<W: Write>(body: &[u8], output: &mut W, options: &AgentOptions) -> io::Result<()> {
    let frame = match decode_body(body) {
        Ok(frame) => frame,
        Err(e) => return write_frame(output, &Frame::error("bad_frame", e.to_string())),
    };
    match frame {
        Frame::Job { job_id, request } => {
            if let Err(reason) = request.validate() {
                return write_frame(output, &Frame::error("bad_job", reason));
            }
            let report = run_job_local(&options.workdir, &request, &options.limits);
            write_frame(output, &Frame::Report { job_id, report })
        }
        Frame::Heartbeat => write_frame(output, &Frame::Heartbeat),
        Frame::Report { .. } | Frame::Error { .. } => write_frame(
            output,
            &Frame::error("unexpected_frame", "agent only accepts job and hb frames"),
        ),
    }
}

/// Serves frames until `input` reaches end of file.
pub fn run_agent<R, W>(mut input: R, mut output: W, options: &AgentOptions) -> io::Result<()>
where
    R: Read + Send + 'static,
    W: Write,
{
    std::fs::create_dir_all(&options.workdir)?;
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    thread::spawn(move || {
        let mut chunk = vec![0u8; 64 * 1024];
        loop {
            match input.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    if tx.send(chunk[..n].to_vec()).is_err() {
                        break;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => break,
            }
        }
    });

    write_frame(&mut output, &Frame::Heartbeat)?;
    let mut buffer = FrameBuffer::default();
    // Set after an oversized header: drop bytes until the sender pauses.
    let mut discarding = false;
    loop {
        if !discarding {
            if let Some(len) = buffer.pending_len() {
                if len > options.max_frame_bytes {
                    write_frame(
                        &mut output,
                        &Frame::error("bad_frame", format!("frame of {len} bytes is too large")),
                    )?;
                    buffer.clear();
                    discarding = true;
                    continue;
                }
            }
            if let Some(body) = buffer.take_body() {
                handle_body(&body, &mut output, options)?;
                continue;
            }
        }
        let wait = if discarding || !buffer.is_empty() {
            options.stall_timeout
        } else {
            options.heartbeat_interval
        };
        match rx.recv_timeout(wait) {
            Ok(chunk) => {
                if !discarding {
                    buffer.push(&chunk);
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                if discarding {
                    discarding = false;
                } else if !buffer.is_empty() {
                    buffer.clear();
                    write_frame(&mut output, &Frame::error("bad_frame", "truncated frame"))?;
                } else {
                    write_frame(&mut output, &Frame::Heartbeat)?;
                }
            }
            Err(RecvTimeoutError::Disconnected) => {
                if !buffer.is_empty() && !discarding {
                    write_frame(&mut output, &Frame::error("bad_frame", "truncated frame"))?;
                }
                return Ok(());
            }
        }
    }
}

/// Entry point shared by the standalone agent binary and `polyjudge agent`.
pub fn agent_main<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let options = match AgentOptions::from_args(args) {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("{msg}");
            return 2;
        }
    };
    let stdout = io::stdout();
    match run_agent(io::stdin(), stdout.lock(), &options) {
        Ok(()) => 0,
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("polyjudge-agent: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let o = AgentOptions::from_args(
            ["--workdir", "/tmp/w", "--heartbeat-ms", "50", "--rlimit-as", "1048576"]
                .map(String::from),
        )
        .unwrap();
        assert_eq!(o.workdir, PathBuf::from("/tmp/w"));
        assert_eq!(o.heartbeat_interval, Duration::from_millis(50));
        assert_eq!(o.limits.address_space_bytes, Some(1 << 20));
        assert!(AgentOptions::from_args(["--bogus".to_string()]).is_err());
        assert!(AgentOptions::from_args(["--workdir".to_string()]).is_err());
        assert!(AgentOptions::from_args(["--stall-ms", "x"].map(String::from)).is_err());
    }
}
