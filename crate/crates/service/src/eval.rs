//! pass@k evaluation over a dataset, from stored or freshly sampled
//! completions.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use polyjudge_core::langconfig::LanguageConfig;
use polyjudge_core::llm::{ChatEndpoint, ChatMessage, EndpointError};
use polyjudge_core::rlmath::pass_at_k;
use polyjudge_core::taskset::{render_prompt_with, Dataset, PromptOptions};
use polyjudge_core::verifier::{Candidate, FailureKind, Verifier, VerifyOptions};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::validate_eval;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task {0} has fewer samples than requested")]
    MissingSamples(String),
    #[error("{0}")]
    InvalidArgs(String),
    #[error("completions file: {0}")]
    Completions(String),
    #[error("generation endpoint failed for task {task}: {source}")]
    Endpoint {
        task: String,
        source: EndpointError,
    },
}

/// One line of a completions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredCompletion {
    pub task_id: String,
    pub sample_index: u64,
    pub completion_text: String,
}

/// Completions per task id, ordered by sample index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompletionSet {
    by_task: HashMap<String, BTreeMap<u64, String>>,
}

impl CompletionSet {
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut set = CompletionSet::default();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: StoredCompletion = serde_json::from_str(line)
                .map_err(|e| EvalError::Completions(format!("line {}: {e}", idx + 1)))?;
            let samples = set.by_task.entry(record.task_id.clone()).or_default();
            if samples
                .insert(record.sample_index, record.completion_text)
                .is_some()
            {
                return Err(EvalError::Completions(format!(
                    "line {}: duplicate sample {} for task {}",
                    idx + 1,
                    record.sample_index,
                    record.task_id
                )));
            }
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Completions(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Samples `0..n` for a task; extra samples are ignored.
    fn first_n(&self, task_id: &str, n: u64) -> Result<Vec<String>, EvalError> {
        let missing = || EvalError::MissingSamples(task_id.to_string());
        let samples = self.by_task.get(task_id).ok_or_else(missing)?;
        (0..n)
            .map(|i| samples.get(&i).cloned().ok_or_else(missing))
            .collect()
    }
}

pub enum CompletionSource<'a> {
    Stored(&'a CompletionSet),
    Endpoint(&'a dyn ChatEndpoint),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub samples: u64,
    pub ks: Vec<u64>,
    pub temperature: f64,
    /// Prepend the language's prompt prefix when sampling.
    pub include_prefix: bool,
    pub options: VerifyOptions,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: 20,
            ks: vec![1],
            temperature: 0.2,
            include_prefix: true,
            // Reports show every test verdict.
            options: VerifyOptions {
                fail_fast: false,
                ..VerifyOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub n: u64,
    pub c: u64,
    pub pass_at_k: Vec<PassAtK>,
    /// Samples per failure kind; `none` counts passes.
    pub outcomes: BTreeMap<String, u64>,
}

/// The JSON form is deterministic for a fixed input: tasks in dataset order,
/// maps sorted by key, and no timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub language: String,
    pub samples: u64,
    /// Mean over tasks of the per-task estimates, summed in task order.
    pub pass_at_k: Vec<PassAtK>,
    pub outcomes: BTreeMap<String, u64>,
    pub tasks: Vec<TaskResult>,
    #[serde(skip)]
    pub wall_time: Duration,
}

pub fn kind_name(kind: FailureKind) -> String {
    match serde_json::to_value(kind) {
        Ok(serde_json::Value::String(s)) => s,
        _ => format!("{kind:?}"),
    }
}

fn sample(
    endpoint: &dyn ChatEndpoint,
    prompt: String,
    settings: &EvalSettings,
    task_id: &str,
) -> Result<Vec<String>, EvalError> {
    let n = u32::try_from(settings.samples)
        .map_err(|_| EvalError::InvalidArgs("samples does not fit in u32".into()))?;
    let completions = endpoint
        .complete(&[ChatMessage::user(prompt)], n, Some(settings.temperature))
        .map_err(|source| EvalError::Endpoint {
            task: task_id.to_string(),
            source,
        })?;
    if (completions.len() as u64) < settings.samples {
        return Err(EvalError::MissingSamples(task_id.to_string()));
    }
    Ok(completions)
}

/// Verifies `samples` completions per task and aggregates pass@k.
///
/// Stored completions are checked for every task before anything runs.
pub fn eval_run(
    dataset: &Dataset,
    config: &LanguageConfig,
    source: CompletionSource<'_>,
    verifier: &Verifier,
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    validate_eval(settings.samples, &settings.ks).map_err(EvalError::InvalidArgs)?;
    let mut ks = settings.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let started = Instant::now();
    let language = config.language();

    let stored: Option<Vec<Vec<String>>> = match &source {
        CompletionSource::Stored(set) => Some(
            dataset
                .tasks
                .iter()
                .map(|t| set.first_n(&t.id, settings.samples))
                .collect::<Result<_, _>>()?,
        ),
        CompletionSource::Endpoint(_) => None,
    };

    let mut tasks = Vec::with_capacity(dataset.tasks.len());
    let mut sums = vec![0.0; ks.len()];
    let mut outcomes: BTreeMap<String, u64> = BTreeMap::new();
    for (idx, task) in dataset.tasks.iter().enumerate() {
        let texts = match (&stored, &source) {
            (Some(all), _) => all[idx].clone(),
            (None, CompletionSource::Endpoint(endpoint)) => {
                let prompt = render_prompt_with(
                    task,
                    config,
                    PromptOptions {
                        include_prefix: settings.include_prefix,
                        ..PromptOptions::default()
                    },
                );
                sample(*endpoint, prompt, settings, &task.id)?
            }
            (None, CompletionSource::Stored(_)) => unreachable!("stored completions are preloaded"),
        };
        let candidates: Vec<Candidate> = texts
            .into_iter()
            .map(|text| Candidate::new(text, &language))
            .collect();
        let verdicts = verifier.verify_group_with(&candidates, task, config, &settings.options);
        let c = verdicts.iter().filter(|v| v.reward == 1).count() as u64;
        let mut task_outcomes: BTreeMap<String, u64> = BTreeMap::new();
        for verdict in &verdicts {
            *task_outcomes.entry(kind_name(verdict.failure_kind)).or_default() += 1;
        }
        for (kind, count) in &task_outcomes {
            *outcomes.entry(kind.clone()).or_default() += count;
        }
        let mut estimates = Vec::with_capacity(ks.len());
        for (i, &k) in ks.iter().enumerate() {
            let value = pass_at_k(settings.samples, c, k)
                .map_err(|e| EvalError::InvalidArgs(e.to_string()))?;
            sums[i] += value;
            estimates.push(PassAtK { k, value });
        }
        tracing::info!(task = %task.id, c, n = settings.samples, "task evaluated");
        tasks.push(TaskResult {
            task_id: task.id.clone(),
            n: settings.samples,
            c,
            pass_at_k: estimates,
            outcomes: task_outcomes,
        });
    }
    let count = dataset.tasks.len().max(1) as f64;
    Ok(EvalReport {
        dataset: dataset.source_name.clone(),
        language,
        samples: settings.samples,
        pass_at_k: ks
            .iter()
            .zip(&sums)
            .map(|(&k, &sum)| PassAtK {
                k,
                value: sum / count,
            })
            .collect(),
        outcomes,
        tasks,
        wall_time: started.elapsed(),
    })
}

impl EvalReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    /// Human-readable table with pass rates as whole percentages.
    pub fn to_table(&self) -> String {
        let id_width = self
            .tasks
            .iter()
            .map(|t| t.task_id.len())
            .chain(["task".len(), "mean".len()])
            .max()
            .unwrap_or(4);
        let ratio_width = format!("{0}/{0}", self.samples).len().max(3);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} ({}), {} tasks, n={}",
            self.dataset,
            self.language,
            self.tasks.len(),
            self.samples
        );
        let _ = write!(out, "{:<id_width$}  {:>ratio_width$}", "task", "c/n");
        for p in &self.pass_at_k {
            let _ = write!(out, "  {:>7}", format!("pass@{}", p.k));
        }
        out.push('\n');
        for task in &self.tasks {
            let ratio = format!("{}/{}", task.c, task.n);
            let _ = write!(out, "{:<id_width$}  {ratio:>ratio_width$}", task.task_id);
            for p in &task.pass_at_k {
                let _ = write!(out, "  {:>7}", percent(p.value));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<id_width$}  {:>ratio_width$}", "mean", "");
        for p in &self.pass_at_k {
            let _ = write!(out, "  {:>7}", percent(p.value));
        }
        out.push('\n');
        let outcomes: Vec<String> = self
            .outcomes
            .iter()
            .map(|(kind, n)| format!("{kind}={n}"))
            .collect();
        let _ = writeln!(out, "outcomes: {}", outcomes.join(" "));
        let _ = writeln!(out, "wall time: {:.1}s", self.wall_time.as_secs_f64());
        out
    }
}

fn percent(value: f64) -> String {
    format!("{:.0}%", value * 100.0)
}
