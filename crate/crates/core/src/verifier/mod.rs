//! Turns completions into binary rewards: extraction, job construction,
//! execution on a pooled container, and classification of the report.

mod compare;
mod extract;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::harness::{
    CompileStatus, HarnessError, JobReport, JobRequest, TestStatus, DEFAULT_COMPILE_TIMEOUT,
    DEFAULT_OUTPUT_CAP, DEFAULT_TEST_TIMEOUT,
};
use crate::langconfig::LanguageConfig;
use crate::sandbox::{ContainerHandle, Pool, ReturnVerdict, SandboxError};
use crate::taskset::Task;

pub use compare::{normalize_output, Comparison};
pub use extract::{canonical_language, extract_code, ExtractError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub completion_text: String,
    pub extracted_program: Option<String>,
    pub language: String,
}

impl Candidate {
    /// Wraps a completion, extracting its program for `language`.
    pub fn new(completion_text: impl Into<String>, language: &str) -> Self {
        let completion_text = completion_text.into();
        let extracted_program = extract_code(&completion_text, language).ok();
        Self {
            completion_text,
            extracted_program,
            language: canonical_language(language),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    None,
    NoCodeBlock,
    Compile,
    Runtime,
    WrongOutput,
    Timeout,
    Overflow,
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    /// 1 when every test passed, else 0.
    pub reward: u8,
    pub report: JobReport,
    pub failure_kind: FailureKind,
}

impl Verdict {
    fn failed(report: JobReport, failure_kind: FailureKind) -> Self {
        Self {
            reward: 0,
            report,
            failure_kind,
        }
    }
}

/// Per-job settings the verifier puts on every request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    #[serde(rename = "compile_timeout_ms", with = "crate::harness::millis")]
    pub compile_timeout: Duration,
    #[serde(rename = "test_timeout_ms", with = "crate::harness::millis")]
    pub test_timeout: Duration,
    pub output_cap_bytes: u64,
    pub fail_fast: bool,
    pub comparison: Comparison,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            compile_timeout: DEFAULT_COMPILE_TIMEOUT,
            test_timeout: DEFAULT_TEST_TIMEOUT,
            output_cap_bytes: DEFAULT_OUTPUT_CAP,
            fail_fast: true,
            comparison: Comparison::Normalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Reuse warm containers from the pool.
    #[default]
    Pooled,
    /// Start a new container for every attempt and destroy it afterwards.
    Fresh,
}

pub fn build_job(
    program: &str,
    task: &Task,
    config: &LanguageConfig,
    options: &VerifyOptions,
) -> JobRequest {
    JobRequest {
        program: program.to_string(),
        filename: config.filename.clone(),
        compile: config.compile.clone(),
        execute: config.execute.clone(),
        tests: task.tests.clone(),
        compile_timeout: options.compile_timeout,
        test_timeout: options.test_timeout,
        output_cap_bytes: options.output_cap_bytes,
        fail_fast: options.fail_fast,
        comparison: options.comparison,
    }
}

/// Maps a report to its failure kind; `None` means reward 1.
pub fn classify(report: &JobReport, expected_tests: usize) -> FailureKind {
    if report.container_crashed {
        return FailureKind::Crash;
    }
    if matches!(
        report.compile_status,
        CompileStatus::CompileError | CompileStatus::CompileTimeout
    ) {
        return FailureKind::Compile;
    }
    if let Some(first) = report.outcomes.iter().find(|o| o.status != TestStatus::Passed) {
        return match first.status {
            TestStatus::WrongOutput => FailureKind::WrongOutput,
            TestStatus::Timeout => FailureKind::Timeout,
            TestStatus::OutputOverflow => FailureKind::Overflow,
            TestStatus::RuntimeError | TestStatus::Skipped | TestStatus::Passed => {
                FailureKind::Runtime
            }
        };
    }
    if report.outcomes.len() != expected_tests {
        return FailureKind::Crash;
    }
    FailureKind::None
}

/// Whether a container that produced `report` should be destroyed: killed
/// processes may leave state behind.
fn leaves_dirty(report: &JobReport) -> bool {
    report.compile_status == CompileStatus::CompileTimeout
        || report
            .outcomes
            .iter()
            .any(|o| matches!(o.status, TestStatus::Timeout | TestStatus::OutputOverflow))
}

#[derive(Debug, Clone)]
pub struct Verifier {
    pool: Arc<Pool>,
    mode: ExecutionMode,
    options: VerifyOptions,
}

impl Verifier {
    pub fn new(pool: Arc<Pool>) -> Self {
        Self {
            pool,
            mode: ExecutionMode::Pooled,
            options: VerifyOptions::default(),
        }
    }

    pub fn with_mode(mut self, mode: ExecutionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_options(mut self, options: VerifyOptions) -> Self {
        self.options = options;
        self
    }

    pub fn options(&self) -> &VerifyOptions {
        &self.options
    }

    pub fn pool(&self) -> &Arc<Pool> {
        &self.pool
    }

    fn acquire(&self, language: &str) -> Result<ContainerHandle, SandboxError> {
        match self.mode {
            ExecutionMode::Pooled => self.pool.checkout(language),
            ExecutionMode::Fresh => self.pool.spawn_fresh(language),
        }
    }

    pub fn verify_candidate(
        &self,
        candidate: &Candidate,
        task: &Task,
        config: &LanguageConfig,
    ) -> Verdict {
        self.verify_with(candidate, task, config, &self.options)
    }

    pub fn verify_with(
        &self,
        candidate: &Candidate,
        task: &Task,
        config: &LanguageConfig,
        options: &VerifyOptions,
    ) -> Verdict {
        let Some(program) = &candidate.extracted_program else {
            return Verdict::failed(JobReport::empty(), FailureKind::NoCodeBlock);
        };
        let request = build_job(program, task, config, options);
        if let Err(reason) = request.validate() {
            tracing::warn!(task = %task.id, %reason, "job is invalid");
            return Verdict::failed(JobReport::crashed(), FailureKind::Crash);
        }
        let language = config.language();
        // One retry on a fresh container after a crash.
        for attempt in 0..2 {
            let mut handle = match self.acquire(&language) {
                Ok(handle) => handle,
                Err(e) => {
                    tracing::warn!(task = %task.id, attempt, error = %e, "no container");
                    continue;
                }
            };
            match handle.run_job(&request) {
                Ok(report) => {
                    let verdict = if leaves_dirty(&report) {
                        ReturnVerdict::Dirty
                    } else {
                        ReturnVerdict::Clean
                    };
                    handle.give_back(verdict);
                    let kind = classify(&report, request.tests.len());
                    return Verdict {
                        reward: u8::from(kind == FailureKind::None),
                        report,
                        failure_kind: kind,
                    };
                }
                Err(HarnessError::Rejected { code, message }) => {
                    tracing::warn!(task = %task.id, %code, %message, "agent rejected job");
                    handle.give_back(ReturnVerdict::Clean);
                    return Verdict::failed(JobReport::crashed(), FailureKind::Crash);
                }
                Err(e) => {
                    tracing::info!(task = %task.id, attempt, error = %e, "container lost");
                    handle.give_back(ReturnVerdict::Dirty);
                }
            }
        }
        Verdict::failed(JobReport::crashed(), FailureKind::Crash)
    }

    /// Verifies candidates concurrently, at most pool-capacity at a time.
    /// Verdicts come back in input order.
    pub fn verify_group(
        &self,
        candidates: &[Candidate],
        task: &Task,
        config: &LanguageConfig,
    ) -> Vec<Verdict> {
        self.verify_group_with(candidates, task, config, &self.options)
    }

    pub fn verify_group_with(
        &self,
        candidates: &[Candidate],
        task: &Task,
        config: &LanguageConfig,
        options: &VerifyOptions,
    ) -> Vec<Verdict> {
        let workers = self.pool.capacity().min(candidates.len());
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Verdict>>> =
            candidates.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(candidate) = candidates.get(i) else {
                        break;
                    };
                    let verdict = self.verify_with(candidate, task, config, options);
                    *slots[i].lock().unwrap() = Some(verdict);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every candidate verified"))
            .collect()
    }
}
