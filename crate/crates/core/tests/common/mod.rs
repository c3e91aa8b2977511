#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use polyjudge_core::langconfig::{load_config, LanguageConfig};
use polyjudge_core::sandbox::{AgentCommand, Pool, PoolConfig, ProcessDriver};
use polyjudge_core::taskset::{load_dataset, Dataset, IoExample, Task};

pub fn fixtures() -> PathBuf {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures")).to_path_buf()
}

pub fn config(name: &str) -> LanguageConfig {
    load_config(&fixtures().join("configs").join(format!("{name}.yaml"))).unwrap()
}

pub fn golden_tasks() -> Dataset {
    load_dataset(&fixtures().join("golden/tasks.jsonl")).unwrap()
}

/// task id -> kind (correct/wrong/loop/bomb) -> source
pub fn golden_programs(language: &str) -> BTreeMap<String, BTreeMap<String, String>> {
    let text = std::fs::read_to_string(fixtures().join(format!("golden/{language}.yaml"))).unwrap();
    serde_yaml::from_str(&text).unwrap()
}

pub fn agent() -> AgentCommand {
    AgentCommand::new(env!("CARGO_BIN_EXE_polyjudge-agent"))
}

pub fn small_pool_config(target: usize) -> PoolConfig {
    let mut config = PoolConfig {
        target_size_per_language: target,
        spawn_timeout: Duration::from_secs(10),
        ..PoolConfig::default()
    };
    config.limits.memory_bytes = 1 << 30;
    config
}

/// A started pool for the given fixture languages, waited until full.
pub fn process_pool(config: PoolConfig, languages: &[&str]) -> Arc<Pool> {
    let driver = Arc::new(ProcessDriver::detect(agent()));
    let pool = Arc::new(Pool::new(driver, config).unwrap());
    for name in languages {
        let cfg = self::config(name);
        pool.start_language(&cfg).unwrap();
        pool.wait_until_ready(&cfg.language(), Duration::from_secs(20))
            .unwrap();
    }
    pool
}

pub fn fenced(language: &str, code: &str) -> String {
    format!("Here is my solution.\n```{language}\n{code}```\n")
}

pub fn task(id: &str, tests: &[(&str, &str)]) -> Task {
    Task {
        id: id.into(),
        description: "test task".into(),
        input_format: "text".into(),
        output_format: "text".into(),
        tests: tests.iter().map(|(i, o)| IoExample::new(*i, *o)).collect(),
        allow_empty_output: false,
    }
}

pub fn echo_task() -> Task {
    task("echo", &[("a\n", "a\n"), ("hello\n", "hello\n")])
}
