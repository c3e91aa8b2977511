use serde::{Deserialize, Serialize};

/// How a program's stdout is compared against the expected output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Compare after [`normalize_output`] on both sides.
    #[default]
    Normalized,
    /// Byte equality.
    Exact,
}

impl Comparison {
    pub fn matches(self, actual: &str, expected: &str) -> bool {
        match self {
            Comparison::Normalized => normalize_output(actual) == normalize_output(expected),
            Comparison::Exact => actual == expected,
        }
    }
}

/// Canonical form of program output: CRLF becomes LF, trailing whitespace is
/// stripped from every line, trailing blank lines are dropped, and a
/// non-empty result ends in exactly one LF.
pub fn normalize_output(raw: &str) -> String {
    let unified = raw.replace("\r\n", "\n");
    let mut lines: Vec<&str> = unified.split('\n').map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return String::new();
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}
