//! Command-line entry points.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use polyjudge_core::harness::agent::agent_main;
use polyjudge_core::langconfig::{build_plan, load_config, LanguageConfig};
use polyjudge_core::llm::{ChatEndpoint, EndpointConfig, HttpChatEndpoint};
use polyjudge_core::sandbox::{Pool, PoolConfig};
use polyjudge_core::taskset::{load_dataset, reformulate_task, save_dataset, Dataset, DatasetError};
use polyjudge_core::verifier::Verifier;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ServiceConfig;
use crate::driver::{make_driver, DriverKind, AGENT_SUBCOMMAND};
use crate::eval::{eval_run, CompletionSet, CompletionSource, EvalSettings};
use crate::server::{serve, shutdown_signal, AppState};

/// Name under which this executable runs as the in-container agent.
pub const AGENT_PROGRAM_NAME: &str = "polyjudge-agent";

/// Read when no `--token-env` is given and the variable is set.
pub const DEFAULT_TOKEN_ENV: &str = "POLYJUDGE_API_TOKEN";

#[derive(Debug, Parser)]
#[command(name = "polyjudge", version, about = "Verify candidate programs in sandboxed pools")]
pub struct Cli {
    /// Log filter, e.g. `info` or `polyjudge_core=debug`.
    #[arg(long, global = true, env = "POLYJUDGE_LOG", default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP verification service.
    Serve(ServeArgs),
    /// Compute pass@k for a dataset from stored or sampled completions.
    Eval(EvalArgs),
    /// Build (or find cached) sandbox images for language configurations.
    BuildImage(BuildImageArgs),
    /// Check datasets (.jsonl) and language configurations (.yaml).
    Validate(ValidateArgs),
    /// Restate function-style problems as stdin/stdout tasks.
    Reformulate(ReformulateArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `listen_address`.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, value_enum)]
    pub driver: Option<DriverKind>,
}

#[derive(Debug, Args, Default)]
pub struct EndpointArgs {
    /// Chat-completions URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
}

impl EndpointArgs {
    fn resolve(&self, fallback: Option<&EndpointConfig>) -> anyhow::Result<Option<EndpointConfig>> {
        let mut config = match (&self.endpoint, fallback) {
            (Some(url), _) => {
                let model = self
                    .model
                    .clone()
                    .or_else(|| fallback.map(|f| f.model.clone()))
                    .ok_or_else(|| anyhow!("--model is required with --endpoint"))?;
                EndpointConfig::new(url.clone(), model)
            }
            (None, Some(f)) => f.clone(),
            (None, None) => return Ok(None),
        };
        if let Some(model) = &self.model {
            config.model = model.clone();
        }
        if let Some(var) = &self.token_env {
            config.token_env = Some(var.clone());
        } else if config.token_env.is_none() && std::env::var_os(DEFAULT_TOKEN_ENV).is_some() {
            config.token_env = Some(DEFAULT_TOKEN_ENV.into());
        }
        Ok(Some(config))
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Service configuration supplying pool, verify and eval defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Language configuration file, or a language named in `--config`.
    #[arg(long)]
    pub language: String,
    /// JSONL of {task_id, sample_index, completion_text}.
    #[arg(long, conflicts_with = "endpoint")]
    pub completions: Option<PathBuf>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Samples per task (n).
    #[arg(long)]
    pub samples: Option<u64>,
    /// k for pass@k; repeatable.
    #[arg(long)]
    pub k: Vec<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Do not prepend the language's prompt prefix when sampling.
    #[arg(long)]
    pub no_prefix: bool,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub driver: Option<DriverKind>,
    /// Warm containers to keep.
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub test_timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildImageArgs {
    #[arg(required = true)]
    pub configs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    pub driver: DriverKind,
    #[arg(long)]
    pub agent_binary: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReformulateArgs {
    /// JSONL of {id, problem, tests}.
    #[arg(long)]
    pub input: PathBuf,
    /// Where the reformulated tasks are written, as dataset JSONL.
    #[arg(long)]
    pub output: PathBuf,
    /// Service configuration supplying the endpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long)]
    pub json: bool,
}

/// One line of reformulation input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceProblem {
    pub id: String,
    pub problem: String,
    pub tests: String,
}

/// Dispatches agent mode, then parses the CLI. Returns the exit status.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let program = args
        .first()
        .and_then(|a| Path::new(a).file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rest = || args.iter().skip(1).map(|a| a.to_string_lossy().into_owned());
    if program == AGENT_PROGRAM_NAME {
        return agent_main(rest());
    }
    if args.get(1).is_some_and(|a| a == AGENT_SUBCOMMAND) {
        return agent_main(rest().skip(1));
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(&cli.log);
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn init_logging(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn run(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Serve(args) => serve_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::BuildImage(args) => build_image_cmd(args),
        Command::Validate(args) => validate_cmd(args),
        Command::Reformulate(args) => reformulate_cmd(args),
    }
}

fn serve_cmd(args: ServeArgs) -> anyhow::Result<i32> {
    let mut config = ServiceConfig::load(&args.config)?;
    if let Some(listen) = args.listen {
        config.listen_address = listen;
    }
    if let Some(driver) = args.driver {
        config.driver = driver;
    }
    let addr = config.socket_addr()?;
    let state = AppState::start(&config).context("starting pools")?;
    let runtime = tokio::runtime::Runtime::new()?;
    let result = runtime.block_on(async {
        let listener = match tokio::net::TcpListener::bind(addr).await {
            Ok(l) => l,
            Err(e) => {
                state.shutdown();
                return Err(anyhow!("cannot bind {addr}: {e}"));
            }
        };
        let local = listener.local_addr()?;
        // Scripts wait for this line before sending requests.
        println!("listening on {local}");
        let _ = std::io::stdout().flush();
        serve(listener, state, shutdown_signal()).await?;
        Ok(())
    });
    result.map(|_| 0)
}

fn resolve_language(spec: &str, service: Option<&ServiceConfig>) -> anyhow::Result<LanguageConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        return Ok(load_config(path)?);
    }
    if let Some(service) = service {
        for candidate in &service.languages {
            let config = load_config(candidate)?;
            if config.language() == spec || config.name == spec {
                return Ok(config);
            }
        }
    }
    bail!("`{spec}` is neither a language config file nor a configured language")
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<i32> {
    let service = args.config.as_deref().map(ServiceConfig::load).transpose()?;
    let language = resolve_language(&args.language, service.as_ref())?;
    let dataset = load_dataset(&args.dataset)?;

    let defaults = service.as_ref().map(|s| s.eval.clone()).unwrap_or_default();
    let mut settings = EvalSettings {
        samples: args.samples.unwrap_or(defaults.samples),
        ks: if args.k.is_empty() { defaults.k } else { args.k.clone() },
        temperature: args.temperature.unwrap_or(defaults.temperature),
        include_prefix: defaults.include_prefix && !args.no_prefix,
        ..EvalSettings::default()
    };
    if let Some(service) = &service {
        settings.options = service.verify.clone();
        settings.options.fail_fast = false;
    }
    if let Some(ms) = args.test_timeout_ms {
        settings.options.test_timeout = std::time::Duration::from_millis(ms);
    }

    let stored = args.completions.as_deref().map(CompletionSet::load).transpose()?;
    let endpoint: Option<Box<dyn ChatEndpoint>> = if stored.is_some() {
        None
    } else {
        let config = args
            .endpoint
            .resolve(service.as_ref().and_then(|s| s.endpoint.as_ref()))?
            .ok_or_else(|| anyhow!("give --completions or a generation --endpoint"))?;
        Some(Box::new(HttpChatEndpoint::new(config)?))
    };
    let source = match (&stored, &endpoint) {
        (Some(set), _) => CompletionSource::Stored(set),
        (None, Some(endpoint)) => CompletionSource::Endpoint(endpoint.as_ref()),
        (None, None) => unreachable!("one source is always resolved"),
    };

    let mut pool_config = service.as_ref().map(|s| s.pool.clone()).unwrap_or_default();
    if let Some(size) = args.pool_size {
        pool_config.target_size_per_language = size;
    }
    let driver_kind = args
        .driver
        .or(service.as_ref().map(|s| s.driver))
        .unwrap_or_default();
    let agent = service.as_ref().and_then(|s| s.agent_binary.clone());
    let pool = start_pool(driver_kind, agent.as_deref(), pool_config, &language)?;
    let verifier = Verifier::new(pool.clone());
    let result = eval_run(&dataset, &language, source, &verifier, &settings);
    pool.shutdown();
    let report = result?;

    let json = report.to_json();
    if let Some(out) = &args.out {
        std::fs::write(out, &json).with_context(|| format!("writing {}", out.display()))?;
    }
    if args.json {
        print!("{json}");
    } else {
        print!("{}", report.to_table());
    }
    Ok(0)
}

fn start_pool(
    kind: DriverKind,
    agent: Option<&Path>,
    config: PoolConfig,
    language: &LanguageConfig,
) -> anyhow::Result<Arc<Pool>> {
    let spawn_timeout = config.spawn_timeout;
    let pool = Arc::new(Pool::new(make_driver(kind, agent)?, config)?);
    pool.start_language(language)?;
    pool.wait_until_ready(&language.language(), spawn_timeout)?;
    Ok(pool)
}

fn build_image_cmd(args: BuildImageArgs) -> anyhow::Result<i32> {
    let driver = make_driver(args.driver, args.agent_binary.as_deref())?;
    let mut results = Vec::new();
    let mut failed = false;
    for path in &args.configs {
        let outcome = load_config(path)
            .map_err(anyhow::Error::from)
            .and_then(|config| {
                let image = driver.ensure_image(&build_plan(&config))?;
                Ok((config.language(), image))
            });
        match outcome {
            Ok((language, image)) => {
                if !args.json {
                    println!("{}: {image}", path.display());
                }
                results.push(json!({"config": path, "language": language, "image": image}));
            }
            Err(e) => {
                failed = true;
                if !args.json {
                    eprintln!("{}: {e:#}", path.display());
                }
                results.push(json!({"config": path, "error": format!("{e:#}")}));
            }
        }
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&json!({"driver": driver.name(), "images": results}))?);
    }
    Ok(i32::from(failed))
}

fn dataset_error_kind(e: &DatasetError) -> &'static str {
    match e {
        DatasetError::Parse { .. } => "Parse",
        DatasetError::DuplicateId { .. } => "DuplicateId",
        DatasetError::EmptyTests { .. } => "EmptyTests",
        DatasetError::Invalid { .. } => "Invalid",
        DatasetError::Io { .. } => "Io",
    }
}

fn is_yaml(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("yaml" | "yml")
    )
}

fn validate_cmd(args: ValidateArgs) -> anyhow::Result<i32> {
    let mut results = Vec::new();
    let mut failed = false;
    for path in &args.paths {
        let (line, value) = if is_yaml(path) {
            match load_config(path) {
                Ok(config) => {
                    let plan = build_plan(&config);
                    (
                        format!("{}: language {} OK, image {}", path.display(), config.language(), plan.tag),
                        json!({"path": path, "kind": "language", "language": config.language(), "image": plan.tag}),
                    )
                }
                Err(e) => {
                    failed = true;
                    (
                        format!("{}: {e}", path.display()),
                        json!({"path": path, "kind": "language", "error": e.to_string()}),
                    )
                }
            }
        } else {
            match load_dataset(path) {
                Ok(dataset) => (
                    format!("{}: {} tasks OK", path.display(), dataset.len()),
                    json!({"path": path, "kind": "dataset", "tasks": dataset.len()}),
                ),
                Err(e) => {
                    failed = true;
                    let kind = dataset_error_kind(&e);
                    (
                        format!("{}: {kind}: {e}", path.display()),
                        json!({"path": path, "kind": "dataset", "error": {"kind": kind, "message": e.to_string()}}),
                    )
                }
            }
        };
        if !args.json {
            if value.get("error").is_some() {
                eprintln!("{line}");
            } else {
                println!("{line}");
            }
        }
        results.push(value);
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    }
    Ok(i32::from(failed))
}

fn load_sources(path: &Path) -> anyhow::Result<Vec<SourceProblem>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn reformulate_cmd(args: ReformulateArgs) -> anyhow::Result<i32> {
    let service = args.config.as_deref().map(ServiceConfig::load).transpose()?;
    let endpoint_config = args
        .endpoint
        .resolve(service.as_ref().and_then(|s| s.endpoint.as_ref()))?
        .ok_or_else(|| anyhow!("--endpoint and --model are required"))?;
    let endpoint = HttpChatEndpoint::new(endpoint_config)?;
    let sources = load_sources(&args.input)?;
    let (dataset, failures) = reformulate_all(&sources, &endpoint, &args.output)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "written": dataset.len(),
                "output": args.output,
                "failures": failures.iter().map(|(id, e)| json!({"id": id, "error": e})).collect::<Vec<_>>(),
            }))?
        );
    } else {
        for (id, e) in &failures {
            eprintln!("{id}: {e}");
        }
        println!(
            "{} of {} problems reformulated into {}",
            dataset.len(),
            sources.len(),
            args.output.display()
        );
    }
    Ok(i32::from(!failures.is_empty()))
}

/// Reformulates every problem, writes the successes, and returns them with
/// the failures by id.
pub fn reformulate_all(
    sources: &[SourceProblem],
    endpoint: &dyn ChatEndpoint,
    output: &Path,
) -> anyhow::Result<(Dataset, Vec<(String, String)>)> {
    let mut tasks = Vec::new();
    let mut failures = Vec::new();
    for source in sources {
        match reformulate_task(&source.id, &source.problem, &source.tests, endpoint) {
            Ok(task) => tasks.push(task),
            Err(e) => failures.push((source.id.clone(), e.to_string())),
        }
    }
    let dataset = Dataset {
        tasks,
        source_name: output
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string(),
    };
    save_dataset(&dataset, output)?;
    Ok((dataset, failures))
}
