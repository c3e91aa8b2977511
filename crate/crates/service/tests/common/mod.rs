#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use polyjudge::server::{serve, AppState};
use polyjudge_core::langconfig::{load_config, LanguageConfig};
use polyjudge_core::sandbox::{AgentCommand, Pool, PoolConfig, ProcessDriver};
use polyjudge_core::taskset::{load_dataset, Task};
use polyjudge_core::verifier::VerifyOptions;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_polyjudge")
}

pub fn config(name: &str) -> LanguageConfig {
    load_config(&fixtures().join("configs").join(format!("{name}.yaml"))).unwrap()
}

pub fn golden_task(id: &str) -> Task {
    load_dataset(&fixtures().join("golden/tasks.jsonl"))
        .unwrap()
        .get(id)
        .unwrap()
        .clone()
}

pub fn fenced(lang: &str, code: &str) -> String {
    format!("Solution:\n```{lang}\n{code}```\n")
}

pub fn pool_config(target: usize) -> PoolConfig {
    let mut config = PoolConfig {
        target_size_per_language: target,
        spawn_timeout: Duration::from_secs(10),
        ..PoolConfig::default()
    };
    config.limits.memory_bytes = 1 << 30;
    config
}

/// A pool running this package's binary in agent mode.
pub fn process_pool(pool_cfg: PoolConfig, languages: &[&str]) -> Arc<Pool> {
    let driver = ProcessDriver::detect(AgentCommand::new(bin()).with_args(["agent"]));
    let pool = Arc::new(Pool::new(Arc::new(driver), pool_cfg).unwrap());
    for name in languages {
        pool.start_language(&config(name)).unwrap();
    }
    for name in languages {
        pool.wait_until_ready(name, Duration::from_secs(20)).unwrap();
    }
    pool
}

/// An in-process server on an ephemeral port.
pub struct TestServer {
    pub base: String,
    pub state: Arc<AppState>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(languages: &[&str], target: usize, queue_bound: usize, defaults: VerifyOptions) -> Self {
        let pool = process_pool(pool_config(target), languages);
        let configs = languages.iter().map(|n| config(n)).collect();
        let state = AppState::new(pool, configs, defaults, queue_bound);
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let serving = state.clone();
        let thread = std::thread::spawn(move || {
            let runtime = tokio::runtime::Runtime::new().unwrap();
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, serving, async {
                    let _ = stopped.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        TestServer {
            base: format!("http://{addr}"),
            state,
            stop: Some(stop),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .unwrap()
}
