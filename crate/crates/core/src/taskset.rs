//! Language-agnostic tasks: a problem statement plus stdin/stdout examples.
//!
//! Datasets are JSON-Lines files, one task object per line:
//!
//! ```json
//! {"id":"mbpp/3","description":"...","input_format":"...","output_format":"...",
//!  "tests":[{"input":"2\n","output":"False\n"}]}
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::langconfig::LanguageConfig;
use crate::llm::{ChatEndpoint, ChatMessage, EndpointError};
use crate::verifier::normalize_output;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IoExample {
    pub input: String,
    pub output: String,
}

impl IoExample {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub description: String,
    pub input_format: String,
    pub output_format: String,
    pub tests: Vec<IoExample>,
    /// Programs that print nothing can otherwise pass tests with empty
    /// expected output, so such tests are rejected unless this is set.
    #[serde(default, skip_serializing_if = "is_false")]
    pub allow_empty_output: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("task `{0}` has no tests")]
    EmptyTests(String),
    #[error("task `{id}` test {index} has empty expected output")]
    EmptyOutput { id: String, index: usize },
    #[error("task id must be non-empty")]
    EmptyId,
}

impl Task {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.id.is_empty() {
            return Err(TaskError::EmptyId);
        }
        if self.tests.is_empty() {
            return Err(TaskError::EmptyTests(self.id.clone()));
        }
        if !self.allow_empty_output {
            if let Some(index) = self
                .tests
                .iter()
                .position(|t| normalize_output(&t.output).is_empty())
            {
                return Err(TaskError::EmptyOutput {
                    id: self.id.clone(),
                    index,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub tasks: Vec<Task>,
    pub source_name: String,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: duplicate task id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: task `{id}` has no tests")]
    EmptyTests { line: usize, id: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: TaskError,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parses JSONL dataset text. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dataset(text: &str, source_name: &str) -> Result<Dataset, DatasetError> {
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(raw).map_err(|e| DatasetError::Parse {
            line,
            reason: e.to_string(),
        })?;
        match task.validate() {
            Ok(()) => {}
            Err(TaskError::EmptyTests(id)) => return Err(DatasetError::EmptyTests { line, id }),
            Err(source) => return Err(DatasetError::Invalid { line, source }),
        }
        if !seen.insert(task.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: task.id });
        }
        tasks.push(task);
    }
    Ok(Dataset {
        tasks,
        source_name: source_name.to_string(),
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    parse_dataset(&text, name)
}

/// JSONL encoding: one compact object per task, each line LF-terminated.
pub fn encode_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    for task in &dataset.tasks {
        out.push_str(&serde_json::to_string(task).expect("task serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, encode_dataset(dataset)).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    /// Prepend the language configuration's prompt prefix.
    pub include_prefix: bool,
    /// Show the first I/O example as a sample.
    pub include_sample: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            include_prefix: true,
            include_sample: true,
        }
    }
}

pub fn render_prompt(task: &Task, config: &LanguageConfig) -> String {
    render_prompt_with(task, config, PromptOptions::default())
}

pub fn render_prompt_with(task: &Task, config: &LanguageConfig, options: PromptOptions) -> String {
    let mut out = String::new();
    let prefix = config.prompt.trim_end();
    if options.include_prefix && !prefix.is_empty() {
        out.push_str(prefix);
        out.push_str("\n\n");
    }
    out.push_str(task.description.trim_end());
    out.push_str("\n\n");
    let _ = writeln!(out, "Input format: {}", task.input_format.trim_end());
    out.push('\n');
    let _ = writeln!(out, "Output format: {}", task.output_format.trim_end());
    if options.include_sample {
        if let Some(sample) = task.tests.first() {
            out.push('\n');
            push_sample_block(&mut out, "Sample input:", &sample.input);
            out.push('\n');
            push_sample_block(&mut out, "Sample output:", &sample.output);
        }
    }
    out
}

fn push_sample_block(out: &mut String, label: &str, body: &str) {
    out.push_str(label);
    out.push_str("\n```\n");
    out.push_str(body);
    if !body.is_empty() && !body.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("```\n");
}

/// Instruction sent to the reformulation model; the two `{...}` slots are
/// replaced with the source problem and its tests.
pub const REFORMULATION_TEMPLATE: &str = r#"You are a competitive programming expert.
You are given a problem that asks you to implement a function.
Your task is to translate the description of the problem into a form that accepts one set of function arguments as inputs and return the function return value as output.

Use programming competition style input and outputs -- that is, priorize the use of spaces and newlines to separate inputs and outputs over using commas and parentheses (or other delimiters). Specifically, for 2d lists, you should print them as a list of lists, where the outer lists elements are separated by newlines and the elements of the inner lists are separated by spaces.
For example, a 2d list like [[1, 2], [3, 4]] should be printed as:
1 2
3 4
Do not use any other delimiters.

If there are multiple 2d lists, you should use 2 newlines to separate them.
for example, a 2d list like [[1, 2], [3, 4]] and [[5, 6], [7, 8]] should be printed as:
1 2
3 4

5 6
7 8


If the problem requires outputing decimal numbers, make sure the output format specifies to round all decimal numbers to 4 decimal places. In this case, you should also round all the numbers in the output to 4 decimal places.

Do not forget to specify the input and output format in the description.

Here is the problem description:
{original mbpp problem description}

Here are the test cases:
{original mbpp test cases}

You should return a json object with the following fields:
- "description": the description of the problem
- "input_format": a string describing the input format
- "output_format": a string describing the output format
- "tests": a list of test cases, each test case is a json object with the following fields:
  - "input": a string that represents the input of the test case, in the same format as the input format in the description
  - "output": a string that represents the output of the test case, in the same format as the output format in the description

Place your response in a single ```json ``` block. Do not include any other text in your response."#;

pub fn reformulation_prompt(source_problem: &str, source_tests: &str) -> String {
    REFORMULATION_TEMPLATE
        .replace("{original mbpp problem description}", source_problem)
        .replace("{original mbpp test cases}", source_tests)
}

/// Number of test cases in a source test listing: one per line starting
/// with `assert`, or one per non-blank line when there are no asserts.
pub fn count_source_tests(source_tests: &str) -> usize {
    let asserts = source_tests
        .lines()
        .filter(|l| {
            let t = l.trim_start();
            t.strip_prefix("assert")
                .is_some_and(|rest| rest.is_empty() || rest.starts_with([' ', '(', '\t']))
        })
        .count();
    if asserts > 0 {
        asserts
    } else {
        source_tests.lines().filter(|l| !l.trim().is_empty()).count()
    }
}

#[derive(Debug, Error)]
pub enum ReformulateError {
    #[error("source problem and tests must be non-empty")]
    EmptySource,
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("response contains no ```json block")]
    NoJsonBlock,
    #[error("reformulated task has a bad or missing `{0}` field")]
    SchemaError(String),
    #[error("source declares {expected} tests but the reformulation has {actual}")]
    TestCountMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Invalid(#[from] TaskError),
}

#[derive(Deserialize)]
struct ReformulatedTask {
    description: serde_json::Value,
    input_format: serde_json::Value,
    output_format: serde_json::Value,
    tests: serde_json::Value,
}

fn last_json_block(response: &str) -> Option<String> {
    let mut found = None;
    let mut lines = response.split_inclusive('\n');
    while let Some(line) = lines.next() {
        let t = line.trim();
        if let Some(info) = t.strip_prefix("```") {
            let mut body = String::new();
            let mut closed = false;
            for inner in lines.by_ref() {
                if inner.trim() == "```" {
                    closed = true;
                    break;
                }
                body.push_str(inner);
            }
            if info.trim().eq_ignore_ascii_case("json") && (closed || !body.is_empty()) {
                found = Some(body);
            }
        }
    }
    found
}

fn scalar_text(value: &serde_json::Value, field: &str) -> Result<String, ReformulateError> {
    match value {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::Bool(b) => Ok(if *b { "True" } else { "False" }.to_string()),
        _ => Err(ReformulateError::SchemaError(field.to_string())),
    }
}

/// Parses a reformulation model response into a task with the given id.
pub fn parse_reformulation(
    id: &str,
    response: &str,
    expected_tests: usize,
) -> Result<Task, ReformulateError> {
    let block = last_json_block(response).ok_or(ReformulateError::NoJsonBlock)?;
    let raw: serde_json::Value = serde_json::from_str(&block)
        .map_err(|e| ReformulateError::SchemaError(format!("json ({e})")))?;
    let parsed: ReformulatedTask = serde_json::from_value(raw).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| msg.clone());
        ReformulateError::SchemaError(field)
    })?;
    let tests_json = parsed
        .tests
        .as_array()
        .ok_or_else(|| ReformulateError::SchemaError("tests".into()))?;
    let mut tests = Vec::with_capacity(tests_json.len());
    for (i, t) in tests_json.iter().enumerate() {
        let input = t
            .get("input")
            .ok_or_else(|| ReformulateError::SchemaError(format!("tests[{i}].input")))?;
        let output = t
            .get("output")
            .ok_or_else(|| ReformulateError::SchemaError(format!("tests[{i}].output")))?;
        tests.push(IoExample::new(
            scalar_text(input, &format!("tests[{i}].input"))?,
            scalar_text(output, &format!("tests[{i}].output"))?,
        ));
    }
    if tests.len() != expected_tests {
        return Err(ReformulateError::TestCountMismatch {
            expected: expected_tests,
            actual: tests.len(),
        });
    }
    let task = Task {
        id: id.to_string(),
        description: scalar_text(&parsed.description, "description")?,
        input_format: scalar_text(&parsed.input_format, "input_format")?,
        output_format: scalar_text(&parsed.output_format, "output_format")?,
        tests,
        allow_empty_output: false,
    };
    task.validate()?;
    Ok(task)
}

/// Asks `endpoint` to restate a function-style problem as a stdin/stdout
/// task. The result always has exactly as many tests as the source.
pub fn reformulate_task(
    id: &str,
    source_problem: &str,
    source_tests: &str,
    endpoint: &dyn ChatEndpoint,
) -> Result<Task, ReformulateError> {
    if source_problem.trim().is_empty() || source_tests.trim().is_empty() {
        return Err(ReformulateError::EmptySource);
    }
    let expected = count_source_tests(source_tests);
    let prompt = reformulation_prompt(source_problem, source_tests);
    let response = endpoint
        .complete(&[ChatMessage::user(prompt)], 1, None)?
        .into_iter()
        .next()
        .ok_or_else(|| EndpointError::Malformed("no completion returned".into()))?;
    parse_reformulation(id, &response, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langconfig::parse_config;

    pub(crate) const NON_PRIME_LINE: &str = r#"{"id":"mbpp/3","description":"Given an integer N (N≥2), determine whether it is a non-prime number. Output 'True' if the number is non-prime, 'False' otherwise.","input_format":"a single integer N (N ≥ 2)","output_format":"a single line containing 'True' or 'False'","tests":[{"input":"2\n","output":"False\n"},{"input":"10\n","output":"True\n"}]}"#;

    fn r_config() -> LanguageConfig {
        parse_config(
            "install: apt-get install -y r-cran-tidyverse\nfilename: snippet.R\nexecute: Rscript snippet.R\nprompt: |\n  Use R version 4.\n  Use `cat` to print.\n",
        )
        .unwrap()
    }

    #[test]
    fn loads_non_prime_task() {
        let ds = parse_dataset(NON_PRIME_LINE, "mbpp").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.tasks[0].tests.len(), 2);
        assert_eq!(ds.tasks[0].tests[1], IoExample::new("10\n", "True\n"));
        assert!(!ds.tasks[0].allow_empty_output);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_dataset("", "x").unwrap().is_empty());
        assert!(parse_dataset("\n  \n", "x").unwrap().is_empty());
    }

    #[test]
    fn empty_tests_rejected_with_line() {
        let text = format!(
            "{NON_PRIME_LINE}\n{}",
            r#"{"id":"t2","description":"d","input_format":"i","output_format":"o","tests":[]}"#
        );
        match parse_dataset(&text, "x") {
            Err(DatasetError::EmptyTests { line: 2, id }) => assert_eq!(id, "t2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{NON_PRIME_LINE}\n\n{NON_PRIME_LINE}\n");
        assert!(matches!(
            parse_dataset(&text, "x"),
            Err(DatasetError::DuplicateId { line: 3, .. })
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = format!("{NON_PRIME_LINE}\n{{\"id\": 3}}\n");
        assert!(matches!(
            parse_dataset(&text, "x"),
            Err(DatasetError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_output_needs_opt_in() {
        let line = r#"{"id":"e","description":"d","input_format":"i","output_format":"o","tests":[{"input":"1\n","output":" \n"}]}"#;
        assert!(matches!(
            parse_dataset(line, "x"),
            Err(DatasetError::Invalid {
                source: TaskError::EmptyOutput { index: 0, .. },
                ..
            })
        ));
        let allowed = line.replace("}]}", "}],\"allow_empty_output\":true}");
        assert!(parse_dataset(&allowed, "x").unwrap().tasks[0].allow_empty_output);
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let ds = parse_dataset(NON_PRIME_LINE, "mbpp").unwrap();
        let encoded = encode_dataset(&ds);
        let again = parse_dataset(&encoded, "mbpp").unwrap();
        assert_eq!(again, ds);
        assert_eq!(encode_dataset(&again), encoded);
    }

    #[test]
    fn prompt_starts_with_prefix() {
        let task = &parse_dataset(NON_PRIME_LINE, "mbpp").unwrap().tasks[0];
        let prompt = render_prompt(task, &r_config());
        assert!(prompt.starts_with("Use R version 4."));
        assert!(prompt.contains("Use `cat` to print.\n\nGiven an integer N"));
        assert!(prompt.contains("determine whether it is a non-prime number"));
        assert!(prompt.contains("Sample input:\n```\n2\n```\n"));
        assert_eq!(prompt, render_prompt(task, &r_config()));
    }

    #[test]
    fn empty_prefix_starts_with_description() {
        let task = &parse_dataset(NON_PRIME_LINE, "mbpp").unwrap().tasks[0];
        let mut config = r_config();
        config.prompt.clear();
        assert!(render_prompt(task, &config).starts_with("Given an integer N"));
        let no_prefix = render_prompt_with(
            task,
            &r_config(),
            PromptOptions {
                include_prefix: false,
                include_sample: false,
            },
        );
        assert!(no_prefix.starts_with("Given an integer N"));
        assert!(!no_prefix.contains("Sample input"));
    }

    #[test]
    fn template_slots_are_filled() {
        let p = reformulation_prompt("PROBLEM", "assert f(1) == 2");
        assert!(p.contains("Here is the problem description:\nPROBLEM\n"));
        assert!(p.contains("Here are the test cases:\nassert f(1) == 2\n"));
        assert!(!p.contains("{original"));
        assert!(p.ends_with("Do not include any other text in your response."));
    }

    #[test]
    fn counts_asserts() {
        assert_eq!(
            count_source_tests("assert is_not_prime(2) == False\nassert is_not_prime(10) == True\n"),
            2
        );
        assert_eq!(count_source_tests("  assert(f(1))\nassertion = 3\n"), 1);
        assert_eq!(count_source_tests("1 2\n\n3 4\n"), 2);
    }

    #[test]
    fn reformulation_requires_json_block() {
        let endpoint = |_: &[ChatMessage]| Ok("Sure! Here it is: {\"description\": 1}".to_string());
        let err = reformulate_task("x", "p", "assert f()", &endpoint).unwrap_err();
        assert!(matches!(err, ReformulateError::NoJsonBlock));
    }

    #[test]
    fn reformulation_schema_errors_name_the_field() {
        let resp = "```json\n{\"description\":\"d\",\"input_format\":\"i\",\"tests\":[]}\n```";
        let err = parse_reformulation("x", resp, 0).unwrap_err();
        assert!(
            matches!(err, ReformulateError::SchemaError(ref f) if f == "output_format"),
            "{err}"
        );
        let resp = "```json\n{\"description\":\"d\",\"input_format\":\"i\",\"output_format\":\"o\",\"tests\":[{\"input\":\"1\"}]}\n```";
        let err = parse_reformulation("x", resp, 1).unwrap_err();
        assert!(matches!(err, ReformulateError::SchemaError(ref f) if f == "tests[0].output"));
    }

    #[test]
    fn empty_source_rejected() {
        let endpoint = |_: &[ChatMessage]| -> Result<String, EndpointError> { unreachable!() };
        assert!(matches!(
            reformulate_task("x", " ", "assert f()", &endpoint),
            Err(ReformulateError::EmptySource)
        ));
    }
}
