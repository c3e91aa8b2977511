//! Pulls the candidate program out of a Markdown-formatted completion.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("completion contains no fenced code block")]
    NoCodeBlock,
}

/// Fence info strings that name the same language.
const ALIASES: &[(&str, &str)] = &[
    ("luajit", "lua"),
    ("jl", "julia"),
    ("rscript", "r"),
    ("ml", "ocaml"),
    ("f", "fortran"),
    ("f90", "fortran"),
    ("f95", "fortran"),
    ("f03", "fortran"),
    ("f08", "fortran"),
    ("fortran90", "fortran"),
    ("py", "python"),
    ("python3", "python"),
    ("pl", "perl"),
    ("sh", "bash"),
    ("shell", "bash"),
    ("js", "javascript"),
    ("node", "javascript"),
    ("rs", "rust"),
    ("c++", "cpp"),
    ("cc", "cpp"),
    ("cxx", "cpp"),
    ("hs", "haskell"),
    ("rb", "ruby"),
];

/// Maps a language name or fence tag onto its canonical lowercase name.
pub fn canonical_language(name: &str) -> String {
    let lower = name.trim().trim_start_matches('.').to_ascii_lowercase();
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == lower)
        .map(|(_, canonical)| (*canonical).to_string())
        .unwrap_or(lower)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FencedBlock {
    tag: String,
    body: String,
}

/// An opening fence: at most three spaces of indent, then three or more
/// backticks or tildes.
fn opening_fence(line: &str) -> Option<(char, usize, &str)> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let marker = rest.chars().next().filter(|c| *c == '`' || *c == '~')?;
    let run = rest.chars().take_while(|c| *c == marker).count();
    if run < 3 {
        return None;
    }
    let info = rest[run..].trim();
    if marker == '`' && info.contains('`') {
        return None;
    }
    Some((marker, run, info))
}

fn is_closing_fence(line: &str, marker: char, min_run: usize) -> bool {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    let indent = trimmed.len() - trimmed.trim_start_matches(' ').len();
    if indent > 3 {
        return false;
    }
    let rest = &trimmed[indent..];
    let run = rest.chars().take_while(|c| *c == marker).count();
    run >= min_run && rest[run..].trim().is_empty()
}

fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut lines = text.split_inclusive('\n');
    while let Some(line) = lines.next() {
        let Some((marker, run, info)) = opening_fence(line.trim_end_matches(['\r', '\n'])) else {
            continue;
        };
        let tag = info.split_whitespace().next().unwrap_or("").to_string();
        let mut body = String::new();
        // An unterminated fence runs to the end of the document.
        for inner in lines.by_ref() {
            if is_closing_fence(inner, marker, run) {
                break;
            }
            body.push_str(inner);
        }
        blocks.push(FencedBlock { tag, body });
    }
    blocks
}

/// Returns the body of the last fenced block tagged with `language` (or an
/// alias of it); failing that, the body of the last fenced block of any tag.
pub fn extract_code(completion: &str, language: &str) -> Result<String, ExtractError> {
    let blocks = fenced_blocks(completion);
    let wanted = canonical_language(language);
    blocks
        .iter()
        .rev()
        .find(|b| !b.tag.is_empty() && canonical_language(&b.tag) == wanted)
        .or_else(|| blocks.last())
        .map(|b| b.body.clone())
        .ok_or(ExtractError::NoCodeBlock)
}
