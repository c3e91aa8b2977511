//! Language configuration files and the container build plans derived from
//! them.
//!
//! A configuration is a handful of YAML keys:
//!
//! ```yaml
//! prompt: Use Lua 5.1, targeting LuaJIT.
//! install: apt-get install -y luajit
//! filename: snippet.lua
//! execute: luajit snippet.lua
//! ```
//!
//! plus optional `compile`, `container.base-image`, `container.type`, and
//! `install.container-instructions` (raw build-file lines).

use std::fmt::Write as _;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::verifier::canonical_language;

/// Base image used when a configuration does not name one.
pub const DEFAULT_BASE_IMAGE: &str = "docker.io/library/debian:bookworm-slim";

/// Bumped whenever the agent's wire behaviour changes; part of every image tag.
pub const HARNESS_VERSION: &str = concat!("polyjudge-agent/", env!("CARGO_PKG_VERSION"));

/// Where the agent binary lives inside built images.
pub const AGENT_PATH_IN_IMAGE: &str = "/usr/local/bin/polyjudge-agent";

/// RAM-disk working directory inside containers.
pub const CONTAINER_WORKDIR: &str = "/work";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid YAML: {0}")]
    Yaml(String),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("field `{field}` must be {expected}")]
    WrongType {
        field: String,
        expected: &'static str,
    },
    #[error("unsafe filename `{0}`: must be a relative path inside the working directory")]
    UnsafePath(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageConfig {
    pub name: String,
    /// Prefix prepended to every task prompt; may be empty.
    pub prompt: String,
    /// Shell command that installs the toolchain.
    pub install: Option<String>,
    pub container_base_image: Option<String>,
    /// `container.type`; recorded, currently without effect.
    pub container_type: Option<String>,
    /// Raw build-file lines, copied into the build verbatim.
    pub container_instructions: Option<String>,
    /// Relative path the candidate source is written to.
    pub filename: String,
    pub compile: Option<String>,
    pub execute: String,
}

impl LanguageConfig {
    /// Canonical language name, used to pick fenced code blocks.
    pub fn language(&self) -> String {
        canonical_language(&self.name)
    }

    /// Serializes back to the YAML layout accepted by [`parse_config`].
    pub fn to_yaml(&self) -> String {
        let mut root = Mapping::new();
        let s = |v: &str| Value::String(v.to_string());
        root.insert(s("name"), s(&self.name));
        root.insert(s("prompt"), s(&self.prompt));
        if self.container_base_image.is_some() || self.container_type.is_some() {
            let mut container = Mapping::new();
            if let Some(image) = &self.container_base_image {
                container.insert(s("base-image"), s(image));
            }
            if let Some(kind) = &self.container_type {
                container.insert(s("type"), s(kind));
            }
            root.insert(s("container"), Value::Mapping(container));
        }
        match (&self.install, &self.container_instructions) {
            (Some(cmd), None) => {
                root.insert(s("install"), s(cmd));
            }
            (command, Some(raw)) => {
                let mut install = Mapping::new();
                if let Some(cmd) = command {
                    install.insert(s("command"), s(cmd));
                }
                install.insert(s("container-instructions"), s(raw));
                root.insert(s("install"), Value::Mapping(install));
            }
            (None, None) => {}
        }
        root.insert(s("filename"), s(&self.filename));
        if let Some(compile) = &self.compile {
            root.insert(s("compile"), s(compile));
        }
        root.insert(s("execute"), s(&self.execute));
        serde_yaml::to_string(&Value::Mapping(root)).expect("mapping of strings serializes")
    }
}

fn string_field(value: &Value, field: &str) -> Result<String, ConfigError> {
    match value {
        Value::String(s) => Ok(s.clone()),
        // Unquoted scalars such as `compile: 1` still make sense as text.
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(ConfigError::WrongType {
            field: field.to_string(),
            expected: "a string",
        }),
    }
}

fn key_name(key: &Value) -> Result<String, ConfigError> {
    match key {
        Value::String(s) => Ok(s.clone()),
        other => Err(ConfigError::UnknownKey(
            serde_yaml::to_string(other)
                .unwrap_or_default()
                .trim()
                .to_string(),
        )),
    }
}

/// Rejects absolute paths, `..`, and anything else that could leave the
/// working directory.
pub fn validate_relative_path(path: &str) -> Result<(), ConfigError> {
    let unsafe_path = || ConfigError::UnsafePath(path.to_string());
    if path.trim().is_empty() || path.contains('\0') || path.contains('\\') {
        return Err(unsafe_path());
    }
    let mut normal = 0;
    for component in Path::new(path).components() {
        match component {
            Component::Normal(_) => normal += 1,
            Component::CurDir => {}
            Component::ParentDir | Component::RootDir | Component::Prefix(_) => {
                return Err(unsafe_path())
            }
        }
    }
    if normal == 0 {
        return Err(unsafe_path());
    }
    Ok(())
}

/// Parses a configuration without a file name; the language name comes from
/// the `name` key or, failing that, the source file extension.
pub fn parse_config(source: &str) -> Result<LanguageConfig, ConfigError> {
    parse_config_named(source, None)
}

/// Reads and parses a configuration file; an absent `name` key defaults to
/// the file stem.
pub fn load_config(path: &Path) -> Result<LanguageConfig, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path.file_stem().and_then(|s| s.to_str());
    parse_config_named(&source, stem)
}

pub fn parse_config_named(
    source: &str,
    default_name: Option<&str>,
) -> Result<LanguageConfig, ConfigError> {
    let doc: Value = serde_yaml::from_str(source).map_err(|e| ConfigError::Yaml(e.to_string()))?;
    let root = match doc {
        Value::Mapping(m) => m,
        Value::Null => Mapping::new(),
        _ => {
            return Err(ConfigError::Yaml(
                "top level must be a mapping of keys".into(),
            ))
        }
    };

    let mut name = None;
    let mut prompt = None;
    let mut install = None;
    let mut container_instructions = None;
    let mut base_image = None;
    let mut container_type = None;
    let mut filename = None;
    let mut compile = None;
    let mut execute = None;

    for (key, value) in &root {
        let key = key_name(key)?;
        match key.as_str() {
            "name" => name = Some(string_field(value, "name")?),
            "prompt" => {
                prompt = Some(match value {
                    Value::Null => String::new(),
                    v => string_field(v, "prompt")?,
                })
            }
            "filename" => filename = Some(string_field(value, "filename")?),
            "compile" => compile = Some(string_field(value, "compile")?),
            "execute" => execute = Some(string_field(value, "execute")?),
            "install" => match value {
                Value::Mapping(m) => {
                    for (k, v) in m {
                        let k = key_name(k)?;
                        match k.as_str() {
                            "container-instructions" => {
                                container_instructions =
                                    Some(string_field(v, "install.container-instructions")?)
                            }
                            "command" => install = Some(string_field(v, "install.command")?),
                            _ => return Err(ConfigError::UnknownKey(format!("install.{k}"))),
                        }
                    }
                }
                Value::Null => {}
                v => install = Some(string_field(v, "install")?),
            },
            "container" => match value {
                Value::Mapping(m) => {
                    for (k, v) in m {
                        let k = key_name(k)?;
                        match k.as_str() {
                            "base-image" => {
                                base_image = Some(string_field(v, "container.base-image")?)
                            }
                            "type" => container_type = Some(string_field(v, "container.type")?),
                            _ => return Err(ConfigError::UnknownKey(format!("container.{k}"))),
                        }
                    }
                }
                _ => {
                    return Err(ConfigError::WrongType {
                        field: "container".into(),
                        expected: "a mapping",
                    })
                }
            },
            _ => return Err(ConfigError::UnknownKey(key)),
        }
    }

    let execute = execute
        .filter(|e| !e.trim().is_empty())
        .ok_or(ConfigError::MissingField("execute"))?;
    let filename = filename.ok_or(ConfigError::MissingField("filename"))?;
    validate_relative_path(&filename)?;

    let name = name
        .or_else(|| default_name.map(str::to_string))
        .unwrap_or_else(|| {
            let ext = Path::new(&filename)
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or("");
            canonical_language(ext)
        });

    let non_blank = |s: Option<String>| s.filter(|v| !v.trim().is_empty());
    Ok(LanguageConfig {
        name,
        prompt: prompt.unwrap_or_default(),
        install: non_blank(install),
        container_base_image: non_blank(base_image),
        container_type,
        container_instructions: non_blank(container_instructions),
        filename,
        compile: non_blank(compile),
        execute,
    })
}

/// One directive in a container build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BuildStep {
    /// Shell command run at build time.
    Run { command: String },
    /// Build-file text copied through untouched.
    Raw { text: String },
    /// Copies the agent binary into the image and makes it the entrypoint.
    Harness { binary: String, workdir: String },
}

impl BuildStep {
    fn render(&self, out: &mut String) {
        match self {
            BuildStep::Run { command } => {
                let _ = writeln!(out, "RUN {}", command.trim_end());
            }
            BuildStep::Raw { text } => {
                out.push_str(text.trim_end_matches('\n'));
                out.push('\n');
            }
            BuildStep::Harness { binary, workdir } => {
                let _ = writeln!(out, "COPY polyjudge-agent {binary}");
                let _ = writeln!(out, "WORKDIR {workdir}");
                let _ = writeln!(
                    out,
                    "ENTRYPOINT [\"{binary}\", \"--workdir\", \"{workdir}\"]"
                );
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBuildPlan {
    pub base_image: String,
    pub build_steps: Vec<BuildStep>,
    pub harness_entrypoint: Vec<String>,
    /// Content hash of everything that affects the built image.
    pub tag: String,
}

impl ImageBuildPlan {
    /// Renders the plan as a Containerfile / Dockerfile.
    pub fn containerfile(&self) -> String {
        let mut out = format!("FROM {}\n", self.base_image);
        for step in &self.build_steps {
            step.render(&mut out);
        }
        out
    }
}

fn plan_tag(base_image: &str, steps: &[BuildStep]) -> String {
    let mut hasher = Sha256::new();
    let canonical = serde_json::to_vec(&(base_image, steps, HARNESS_VERSION))
        .expect("plan fields serialize");
    hasher.update(&canonical);
    let digest = hex::encode(hasher.finalize());
    format!("polyjudge-sandbox:{}", &digest[..24])
}

pub fn build_plan(config: &LanguageConfig) -> ImageBuildPlan {
    let (base_image, default_base) = match &config.container_base_image {
        Some(image) => (image.clone(), false),
        None => (DEFAULT_BASE_IMAGE.to_string(), true),
    };
    let mut build_steps = Vec::new();
    if let Some(install) = &config.install {
        // The stock base image ships without package lists.
        let command = if default_base {
            format!("apt-get update && {}", install.trim())
        } else {
            install.trim().to_string()
        };
        build_steps.push(BuildStep::Run { command });
    }
    if let Some(raw) = &config.container_instructions {
        build_steps.push(BuildStep::Raw { text: raw.clone() });
    }
    build_steps.push(BuildStep::Harness {
        binary: AGENT_PATH_IN_IMAGE.to_string(),
        workdir: CONTAINER_WORKDIR.to_string(),
    });
    let tag = plan_tag(&base_image, &build_steps);
    ImageBuildPlan {
        base_image,
        build_steps,
        harness_entrypoint: vec![
            AGENT_PATH_IN_IMAGE.to_string(),
            "--workdir".to_string(),
            CONTAINER_WORKDIR.to_string(),
        ],
        tag,
    }
}
