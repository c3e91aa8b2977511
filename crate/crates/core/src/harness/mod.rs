//! The execution agent that runs inside each sandbox, and the host side of
//! its wire protocol.
//!
//! A job carries the candidate program, its I/O examples, and timeouts. The
//! agent writes the program into its RAM-disk working directory, compiles it
//! once if the language needs it, runs every test with bounded output
//! capture, and answers with a [`JobReport`].

pub mod agent;
pub mod driver;
pub mod exec;
pub mod protocol;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::taskset::IoExample;
use crate::verifier::Comparison;

pub use driver::{AgentConnection, HarnessError};
pub use exec::{run_job_local, ExecLimits};
pub use protocol::{Frame, FrameError};

/// Default stdout capture limit (5 MiB); programs writing more are killed.
pub const DEFAULT_OUTPUT_CAP: u64 = 5 * 1024 * 1024;
pub const MIN_OUTPUT_CAP: u64 = 1024;
pub const DEFAULT_COMPILE_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_TEST_TIMEOUT: Duration = Duration::from_secs(30);
/// Delay between the polite terminate signal and the hard kill.
pub const KILL_GRACE: Duration = Duration::from_secs(2);
pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(5);

pub(crate) mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

fn default_true() -> bool {
    true
}

fn default_output_cap() -> u64 {
    DEFAULT_OUTPUT_CAP
}

/// Everything the agent needs to judge one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub program: String,
    pub filename: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compile: Option<String>,
    pub execute: String,
    pub tests: Vec<IoExample>,
    #[serde(rename = "compile_timeout_ms", with = "millis")]
    pub compile_timeout: Duration,
    #[serde(rename = "test_timeout_ms", with = "millis")]
    pub test_timeout: Duration,
    #[serde(default = "default_output_cap")]
    pub output_cap_bytes: u64,
    /// Stop at the first failing test; the rest are reported as skipped.
    #[serde(default = "default_true")]
    pub fail_fast: bool,
    #[serde(default)]
    pub comparison: Comparison,
}

impl JobRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.tests.is_empty() {
            return Err("job has no tests".into());
        }
        if self.compile_timeout.is_zero() || self.test_timeout.is_zero() {
            return Err("timeouts must be positive".into());
        }
        if self.output_cap_bytes < MIN_OUTPUT_CAP {
            return Err(format!(
                "output cap {} is below the {MIN_OUTPUT_CAP}-byte minimum",
                self.output_cap_bytes
            ));
        }
        if self.execute.trim().is_empty() {
            return Err("execute command is empty".into());
        }
        crate::langconfig::validate_relative_path(&self.filename).map_err(|e| e.to_string())
    }

    /// Longest the agent can legitimately take: compile plus every test, each
    /// including the kill grace period.
    pub fn time_budget(&self) -> Duration {
        let compile = if self.compile.is_some() {
            self.compile_timeout + KILL_GRACE
        } else {
            Duration::ZERO
        };
        compile + (self.test_timeout + KILL_GRACE) * self.tests.len() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Passed,
    WrongOutput,
    RuntimeError,
    Timeout,
    OutputOverflow,
    /// Not run because an earlier test failed under `fail_fast`.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub index: usize,
    pub status: TestStatus,
    pub exit_code: Option<i32>,
    pub stdout_prefix: String,
    pub stderr_prefix: String,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompileStatus {
    Ok,
    CompileError,
    CompileTimeout,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobReport {
    pub compile_status: CompileStatus,
    #[serde(default)]
    pub compile_log_prefix: String,
    pub outcomes: Vec<TestOutcome>,
    #[serde(default)]
    pub container_crashed: bool,
}

impl JobReport {
    /// Report for a job that never reached a container.
    pub fn empty() -> Self {
        Self {
            compile_status: CompileStatus::NotApplicable,
            compile_log_prefix: String::new(),
            outcomes: Vec::new(),
            container_crashed: false,
        }
    }

    pub fn crashed() -> Self {
        Self {
            container_crashed: true,
            ..Self::empty()
        }
    }

    pub fn all_passed(&self, expected_tests: usize) -> bool {
        !self.container_crashed
            && matches!(
                self.compile_status,
                CompileStatus::Ok | CompileStatus::NotApplicable
            )
            && self.outcomes.len() == expected_tests
            && self.outcomes.iter().all(|o| o.status == TestStatus::Passed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> JobRequest {
        JobRequest {
            program: "print(1)".into(),
            filename: "a.py".into(),
            compile: None,
            execute: "python3 a.py".into(),
            tests: vec![IoExample::new("", "1\n")],
            compile_timeout: DEFAULT_COMPILE_TIMEOUT,
            test_timeout: DEFAULT_TEST_TIMEOUT,
            output_cap_bytes: DEFAULT_OUTPUT_CAP,
            fail_fast: true,
            comparison: Comparison::Normalized,
        }
    }

    #[test]
    fn validation() {
        assert!(request().validate().is_ok());
        let mut r = request();
        r.tests.clear();
        assert!(r.validate().is_err());
        let mut r = request();
        r.output_cap_bytes = 1023;
        assert!(r.validate().is_err());
        let mut r = request();
        r.test_timeout = Duration::ZERO;
        assert!(r.validate().is_err());
        let mut r = request();
        r.filename = "../x".into();
        assert!(r.validate().is_err());
    }

    #[test]
    fn budget_counts_every_test() {
        let mut r = request();
        r.tests.push(IoExample::new("", "1\n"));
        assert_eq!(r.time_budget(), (DEFAULT_TEST_TIMEOUT + KILL_GRACE) * 2);
        r.compile = Some("true".into());
        assert_eq!(
            r.time_budget(),
            (DEFAULT_TEST_TIMEOUT + KILL_GRACE) * 2 + DEFAULT_COMPILE_TIMEOUT + KILL_GRACE
        );
    }

    #[test]
    fn all_passed_requires_every_test() {
        let outcome = |status| TestOutcome {
            index: 0,
            status,
            exit_code: Some(0),
            stdout_prefix: String::new(),
            stderr_prefix: String::new(),
            wall_time_ms: 1,
        };
        let mut report = JobReport::empty();
        report.outcomes = vec![outcome(TestStatus::Passed)];
        assert!(report.all_passed(1));
        assert!(!report.all_passed(2));
        report.outcomes.push(outcome(TestStatus::WrongOutput));
        assert!(!report.all_passed(2));
        report.compile_status = CompileStatus::CompileError;
        report.outcomes.clear();
        assert!(!report.all_passed(0));
    }
}
