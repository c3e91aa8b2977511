//! The agent binary over real pipes.

use std::io::Write;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::{Duration, Instant};

use polyjudge_core::harness::protocol::{encode_frame, read_frame, write_frame, MAX_FRAME_BYTES};
use polyjudge_core::harness::{
    AgentConnection, CompileStatus, Frame, HarnessError, JobRequest, TestStatus,
};
use polyjudge_core::taskset::IoExample;
use polyjudge_core::verifier::Comparison;

struct Agent {
    child: Child,
    stdin: ChildStdin,
    stdout: ChildStdout,
    _dir: tempfile::TempDir,
}

impl Agent {
    fn start(extra: &[&str]) -> Agent {
        let dir = tempfile::tempdir().unwrap();
        let mut child = Command::new(env!("CARGO_BIN_EXE_polyjudge-agent"))
            .arg("--workdir")
            .arg(dir.path())
            .args(extra)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let stdin = child.stdin.take().unwrap();
        let stdout = child.stdout.take().unwrap();
        Agent {
            child,
            stdin,
            stdout,
            _dir: dir,
        }
    }

    fn next(&mut self) -> Frame {
        read_frame(&mut self.stdout, MAX_FRAME_BYTES).unwrap().unwrap()
    }

    /// Next frame that is not a heartbeat.
    fn next_non_hb(&mut self) -> Frame {
        loop {
            match self.next() {
                Frame::Heartbeat => continue,
                other => return other,
            }
        }
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn cat_job() -> JobRequest {
    JobRequest {
        program: "cat\n".into(),
        filename: "main.sh".into(),
        compile: None,
        execute: "sh main.sh".into(),
        tests: vec![IoExample::new("x\n", "x\n"), IoExample::new("y", "z")],
        compile_timeout: Duration::from_secs(5),
        test_timeout: Duration::from_secs(5),
        output_cap_bytes: 1 << 20,
        fail_fast: false,
        comparison: Comparison::Normalized,
    }
}

#[test]
fn first_frame_is_heartbeat_then_job_round_trip() {
    let mut agent = Agent::start(&[]);
    assert_eq!(agent.next(), Frame::Heartbeat);
    write_frame(
        &mut agent.stdin,
        &Frame::Job {
            job_id: Some(41),
            request: cat_job(),
        },
    )
    .unwrap();
    match agent.next_non_hb() {
        Frame::Report { job_id, report } => {
            assert_eq!(job_id, Some(41));
            assert_eq!(report.compile_status, CompileStatus::NotApplicable);
            let statuses: Vec<_> = report.outcomes.iter().map(|o| o.status).collect();
            assert_eq!(statuses, [TestStatus::Passed, TestStatus::WrongOutput]);
            assert_eq!(report.outcomes[1].stdout_prefix, "y");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn idle_agent_sends_periodic_heartbeats() {
    let mut agent = Agent::start(&["--heartbeat-ms", "100"]);
    let started = Instant::now();
    for _ in 0..4 {
        assert_eq!(agent.next(), Frame::Heartbeat);
    }
    let elapsed = started.elapsed();
    assert!(elapsed >= Duration::from_millis(250), "{elapsed:?}");
    assert!(elapsed < Duration::from_secs(3), "{elapsed:?}");
}

#[test]
fn malformed_body_is_reported_and_agent_keeps_serving() {
    let mut agent = Agent::start(&[]);
    assert_eq!(agent.next(), Frame::Heartbeat);
    let garbage = b"{not json";
    agent
        .stdin
        .write_all(&(garbage.len() as u32).to_be_bytes())
        .unwrap();
    agent.stdin.write_all(garbage).unwrap();
    agent.stdin.flush().unwrap();
    match agent.next_non_hb() {
        Frame::Error { code, .. } => assert_eq!(code, "bad_frame"),
        other => panic!("{other:?}"),
    }
    write_frame(&mut agent.stdin, &Frame::Job { job_id: Some(1), request: cat_job() }).unwrap();
    assert!(matches!(agent.next_non_hb(), Frame::Report { job_id: Some(1), .. }));
}

#[test]
fn stalled_partial_frame_is_dropped() {
    let mut agent = Agent::start(&["--stall-ms", "200"]);
    assert_eq!(agent.next(), Frame::Heartbeat);
    let frame = encode_frame(&Frame::Job { job_id: Some(2), request: cat_job() });
    agent.stdin.write_all(&frame[..frame.len() / 2]).unwrap();
    agent.stdin.flush().unwrap();
    match agent.next_non_hb() {
        Frame::Error { code, message } => {
            assert_eq!(code, "bad_frame");
            assert!(message.contains("truncated"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    write_frame(&mut agent.stdin, &Frame::Job { job_id: Some(3), request: cat_job() }).unwrap();
    assert!(matches!(agent.next_non_hb(), Frame::Report { job_id: Some(3), .. }));
}

#[test]
fn oversized_header_is_rejected_and_stream_resyncs() {
    let mut agent = Agent::start(&["--stall-ms", "200"]);
    assert_eq!(agent.next(), Frame::Heartbeat);
    agent.stdin.write_all(&u32::MAX.to_be_bytes()).unwrap();
    agent.stdin.write_all(&[7u8; 1000]).unwrap();
    agent.stdin.flush().unwrap();
    match agent.next_non_hb() {
        Frame::Error { code, message } => {
            assert_eq!(code, "bad_frame");
            assert!(message.contains("too large"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    // Let the discard window close before sending a good frame.
    std::thread::sleep(Duration::from_millis(500));
    write_frame(&mut agent.stdin, &Frame::Job { job_id: Some(4), request: cat_job() }).unwrap();
    assert!(matches!(agent.next_non_hb(), Frame::Report { job_id: Some(4), .. }));
}

#[test]
fn invalid_job_and_unexpected_frames() {
    let mut agent = Agent::start(&[]);
    assert_eq!(agent.next(), Frame::Heartbeat);
    let mut job = cat_job();
    job.tests.clear();
    write_frame(&mut agent.stdin, &Frame::Job { job_id: None, request: job }).unwrap();
    match agent.next_non_hb() {
        Frame::Error { code, .. } => assert_eq!(code, "bad_job"),
        other => panic!("{other:?}"),
    }
    write_frame(&mut agent.stdin, &Frame::error("x", "y")).unwrap();
    match agent.next_non_hb() {
        Frame::Error { code, .. } => assert_eq!(code, "unexpected_frame"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn agent_exits_on_eof() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_polyjudge-agent"))
        .arg("--workdir")
        .arg(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = child.stdout.take().unwrap();
    assert_eq!(
        read_frame(&mut stdout, MAX_FRAME_BYTES).unwrap(),
        Some(Frame::Heartbeat)
    );
    drop(child.stdin.take());
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        if let Some(status) = child.try_wait().unwrap() {
            assert!(status.success());
            break;
        }
        assert!(Instant::now() < deadline, "agent did not exit");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn connection_drives_agent() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_polyjudge-agent"))
        .arg("--workdir")
        .arg(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut conn = AgentConnection::new(child.stdout.take().unwrap(), child.stdin.take().unwrap());
    conn.wait_ready(Duration::from_secs(5)).unwrap();
    for _ in 0..3 {
        let report = conn.run_job(&cat_job()).unwrap();
        assert_eq!(report.outcomes.len(), 2);
    }
    let mut bad = cat_job();
    bad.output_cap_bytes = 10;
    // Validated by the agent, not the connection.
    assert!(matches!(conn.run_job(&bad), Err(HarnessError::Rejected { .. })));

    child.kill().unwrap();
    child.wait().unwrap();
    match conn.run_job(&cat_job()) {
        Err(HarnessError::ContainerCrash(_)) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn connection_times_out_silent_agent() {
    // Says it is ready, then never answers.
    let mut child = Command::new("sh")
        .args(["-c", "printf '\\0\\0\\0\\015{\"type\":\"hb\"}'; sleep 30"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut conn = AgentConnection::new(child.stdout.take().unwrap(), child.stdin.take().unwrap())
        .with_overhead(Duration::from_millis(100));
    conn.wait_ready(Duration::from_secs(5)).unwrap();
    let mut job = cat_job();
    job.tests.truncate(1);
    job.test_timeout = Duration::from_millis(100);
    let started = Instant::now();
    let result = conn.run_job(&job);
    assert!(matches!(result, Err(HarnessError::ContainerCrash(_))), "{result:?}");
    // Budget is test timeout + kill grace + overhead.
    assert!(started.elapsed() < Duration::from_secs(4));
    child.kill().unwrap();
    child.wait().unwrap();
}
