//! Host side of the agent protocol.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::protocol::{read_frame, write_frame, Frame, FrameError, MAX_FRAME_BYTES};
use super::{JobReport, JobRequest};

/// Slack added to a job's time budget for process startup and framing.
pub const PROTOCOL_OVERHEAD: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum HarnessError {
    /// The agent died, closed its stream, or went silent past its deadline.
    #[error("container crashed: {0}")]
    ContainerCrash(String),
    /// The agent answered with a frame that makes no sense here.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The agent refused the job as invalid.
    #[error("job rejected ({code}): {message}")]
    Rejected { code: String, message: String },
}

/// A framed connection to one running agent.
pub struct AgentConnection {
    writer: Box<dyn Write + Send>,
    frames: Receiver<Result<Frame, FrameError>>,
    last_seen: Arc<Mutex<Instant>>,
    closed: Arc<AtomicBool>,
    next_job_id: u64,
    overhead: Duration,
}

impl std::fmt::Debug for AgentConnection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentConnection")
            .field("next_job_id", &self.next_job_id)
            .field("closed", &self.is_closed())
            .finish()
    }
}

impl AgentConnection {
    pub fn new<R, W>(reader: R, writer: W) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        let last_seen = Arc::new(Mutex::new(Instant::now()));
        let closed = Arc::new(AtomicBool::new(false));
        let (seen, done) = (last_seen.clone(), closed.clone());
        let mut reader = reader;
        thread::spawn(move || {
            loop {
                match read_frame(&mut reader, MAX_FRAME_BYTES) {
                    Ok(Some(frame)) => {
                        *seen.lock().unwrap() = Instant::now();
                        if tx.send(Ok(frame)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
            done.store(true, Ordering::SeqCst);
        });
        Self {
            writer: Box::new(writer),
            frames: rx,
            last_seen,
            closed,
            next_job_id: 1,
            overhead: PROTOCOL_OVERHEAD,
        }
    }

    pub fn with_overhead(mut self, overhead: Duration) -> Self {
        self.overhead = overhead;
        self
    }

    /// When the agent last sent a complete frame.
    pub fn last_seen(&self) -> Instant {
        *self.last_seen.lock().unwrap()
    }

    /// True once the agent's output stream has ended.
    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    /// Shared handle to the last-seen timestamp, for liveness monitors.
    pub fn last_seen_handle(&self) -> Arc<Mutex<Instant>> {
        self.last_seen.clone()
    }

    pub fn closed_handle(&self) -> Arc<AtomicBool> {
        self.closed.clone()
    }

    /// Blocks until the agent's first heartbeat.
    pub fn wait_ready(&mut self, timeout: Duration) -> Result<(), HarnessError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.frames.recv_timeout(left) {
                Ok(Ok(Frame::Heartbeat)) => return Ok(()),
                Ok(Ok(other)) => {
                    return Err(HarnessError::Protocol(format!(
                        "expected heartbeat, got {other:?}"
                    )))
                }
                Ok(Err(e)) => return Err(HarnessError::ContainerCrash(e.to_string())),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(HarnessError::ContainerCrash(format!(
                        "no heartbeat within {timeout:?}"
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(HarnessError::ContainerCrash(
                        "agent exited before becoming ready".into(),
                    ))
                }
            }
        }
    }

    /// Sends one job and waits for its report.
    pub fn run_job(&mut self, request: &JobRequest) -> Result<JobReport, HarnessError> {
        // Discard heartbeats and anything left over from an earlier job.
        loop {
            match self.frames.try_recv() {
                Ok(Ok(_)) => continue,
                Ok(Err(e)) => return Err(HarnessError::ContainerCrash(e.to_string())),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    return Err(HarnessError::ContainerCrash("agent stream closed".into()))
                }
            }
        }
        let job_id = self.next_job_id;
        self.next_job_id += 1;
        let frame = Frame::Job {
            job_id: Some(job_id),
            request: request.clone(),
        };
        write_frame(&mut self.writer, &frame)
            .map_err(|e| HarnessError::ContainerCrash(format!("writing job: {e}")))?;

        let deadline = Instant::now() + request.time_budget() + self.overhead;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.frames.recv_timeout(left) {
                Ok(Ok(Frame::Heartbeat)) => {}
                Ok(Ok(Frame::Report { job_id: id, report })) => {
                    if id.is_none() || id == Some(job_id) {
                        return Ok(report);
                    }
                }
                Ok(Ok(Frame::Error { code, message })) => {
                    return Err(if code == "bad_job" {
                        HarnessError::Rejected { code, message }
                    } else {
                        HarnessError::Protocol(format!("{code}: {message}"))
                    })
                }
                Ok(Ok(Frame::Job { .. })) => {
                    return Err(HarnessError::Protocol("agent sent a job frame".into()))
                }
                Ok(Err(e)) => return Err(HarnessError::ContainerCrash(e.to_string())),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(HarnessError::ContainerCrash(format!(
                        "no report within {:?}",
                        request.time_budget() + self.overhead
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(HarnessError::ContainerCrash(
                        "agent exited during the job".into(),
                    ))
                }
            }
        }
    }
}
