use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::harness::{AgentConnection, HarnessError, JobReport, JobRequest};
use crate::langconfig::{build_plan, LanguageConfig};

use super::driver::{ContainerProcess, SandboxDriver};
use super::{ContainerState, PoolConfig, SandboxError};

const MONITOR_TICK: Duration = Duration::from_millis(50);
const CHECKOUT_RECHECK: Duration = Duration::from_millis(50);
const MAX_SPAWN_BACKOFF: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnVerdict {
    /// The job finished normally; the container can serve another.
    Clean,
    /// The container may be contaminated or dead; it is destroyed.
    Dirty,
}

struct Container {
    id: String,
    language: String,
    connection: AgentConnection,
    process: Box<dyn ContainerProcess>,
    ram_disk_path: PathBuf,
    jobs_served: u64,
    state: ContainerState,
}

impl Container {
    fn transition(&mut self, next: ContainerState) {
        debug_assert!(
            self.state.can_transition_to(next),
            "{}: {:?} -> {:?}",
            self.id,
            self.state,
            next
        );
        self.state = next;
    }

    fn is_alive(&mut self, heartbeat_deadline: Duration) -> bool {
        !self.connection.is_closed()
            && !self.process.has_exited()
            && self.connection.last_seen().elapsed() < heartbeat_deadline
    }
}

#[derive(Debug, Clone, Copy)]
struct BusyEntry {
    jobs_served: u64,
    host_pid: Option<u32>,
}

struct Lang {
    image: String,
    warm: VecDeque<Container>,
    busy: HashMap<String, BusyEntry>,
    spawning: usize,
    jobs_served: u64,
    crashes: u64,
    discarded: u64,
    retired: u64,
    spawn_failures: u64,
    consecutive_spawn_failures: u32,
    next_spawn_at: Instant,
    last_spawn_error: Option<String>,
}

impl Lang {
    fn new(image: String) -> Self {
        Self {
            image,
            warm: VecDeque::new(),
            busy: HashMap::new(),
            spawning: 0,
            jobs_served: 0,
            crashes: 0,
            discarded: 0,
            retired: 0,
            spawn_failures: 0,
            consecutive_spawn_failures: 0,
            next_spawn_at: Instant::now(),
            last_spawn_error: None,
        }
    }

    fn live(&self) -> usize {
        self.warm.len() + self.busy.len()
    }
}

#[derive(Default)]
struct State {
    stopped: bool,
    languages: HashMap<String, Lang>,
}

struct Inner {
    driver: Arc<dyn SandboxDriver>,
    config: PoolConfig,
    state: Mutex<State>,
    changed: Condvar,
    next_container: AtomicU64,
    next_job: AtomicU64,
    in_flight: Mutex<HashMap<String, u64>>,
    tag_violations: AtomicU64,
}

/// Counters for one language pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub image: String,
    pub target: usize,
    pub warm: usize,
    pub busy: usize,
    pub spawning: usize,
    pub jobs_served: u64,
    /// Containers found dead, by the monitor or after a job.
    pub crashes: u64,
    /// Containers destroyed after a dirty return while still alive.
    pub discarded: u64,
    pub retired: u64,
    pub spawn_failures: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_spawn_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolMetrics {
    pub driver: String,
    pub stopped: bool,
    pub languages: BTreeMap<String, LanguageMetrics>,
    /// Times a second job was started on a container with one in flight.
    pub tag_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerInfo {
    pub id: String,
    pub state: ContainerState,
    pub jobs_served: u64,
    pub host_pid: Option<u32>,
}

/// Warm containers per language, shared by many workers.
///
/// A monitor thread replaces containers that die while idle or go silent,
/// and keeps each language at its target size.
pub struct Pool {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pool")
            .field("driver", &self.inner.driver.name())
            .field("config", &self.inner.config)
            .finish()
    }
}

fn dispose(mut container: Container, synchronous: bool) {
    if synchronous {
        container.process.kill();
    } else {
        thread::spawn(move || container.process.kill());
    }
}

fn sanitize(language: &str) -> String {
    language
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Starts spawns until live plus spawning containers reach the target.
    fn top_up(self: &Arc<Self>, language: &str, lang: &mut Lang, stopped: bool) {
        if stopped || Instant::now() < lang.next_spawn_at {
            return;
        }
        while lang.live() + lang.spawning < self.config.target_size_per_language {
            lang.spawning += 1;
            let inner = self.clone();
            let language = language.to_string();
            let image = lang.image.clone();
            thread::spawn(move || inner.spawn_one(&language, &image));
        }
    }

    fn new_id(&self, language: &str) -> String {
        format!(
            "pj-{}-{}-{}",
            sanitize(language),
            std::process::id(),
            self.next_container.fetch_add(1, Ordering::SeqCst)
        )
    }

    fn start_container(&self, language: &str, image: &str) -> Result<Container, SandboxError> {
        let id = self.new_id(language);
        let mut spawned = self.driver.spawn(image, &id, &self.config.limits)?;
        if let Err(e) = spawned.connection.wait_ready(self.config.spawn_timeout) {
            spawned.process.kill();
            return Err(SandboxError::SpawnFailed(format!("{id}: {e}")));
        }
        Ok(Container {
            id,
            language: language.to_string(),
            connection: spawned.connection,
            process: spawned.process,
            ram_disk_path: spawned.ram_disk_path,
            jobs_served: 0,
            state: ContainerState::Building,
        })
    }

    fn spawn_one(self: Arc<Self>, language: &str, image: &str) {
        let result = self.start_container(language, image);
        let mut state = self.lock();
        let stopped = state.stopped;
        let Some(lang) = state.languages.get_mut(language) else {
            if let Ok(c) = result {
                dispose(c, false);
            }
            return;
        };
        lang.spawning -= 1;
        match result {
            Ok(container) if stopped => dispose(container, false),
            Ok(mut container) => {
                container.transition(ContainerState::Warm);
                lang.consecutive_spawn_failures = 0;
                lang.warm.push_back(container);
            }
            Err(e) => {
                tracing::warn!(language, error = %e, "container spawn failed");
                lang.spawn_failures += 1;
                lang.consecutive_spawn_failures += 1;
                lang.last_spawn_error = Some(e.to_string());
                let backoff = Duration::from_millis(100)
                    .saturating_mul(1 << lang.consecutive_spawn_failures.min(6))
                    .min(MAX_SPAWN_BACKOFF);
                lang.next_spawn_at = Instant::now() + backoff;
            }
        }
        drop(state);
        self.changed.notify_all();
    }

    fn give_back(self: &Arc<Self>, mut container: Container, verdict: ReturnVerdict, fresh: bool) {
        if fresh {
            dispose(container, true);
            return;
        }
        let mut state = self.lock();
        let stopped = state.stopped;
        let language = container.language.clone();
        let Some(lang) = state.languages.get_mut(&language) else {
            dispose(container, false);
            return;
        };
        lang.busy.remove(&container.id);
        container.jobs_served += 1;
        lang.jobs_served += 1;
        let retire = self
            .config
            .max_jobs_per_container
            .is_some_and(|max| container.jobs_served >= max);
        let alive = container.is_alive(self.config.heartbeat_deadline);
        if stopped {
            dispose(container, false);
        } else if !alive {
            lang.crashes += 1;
            container.transition(ContainerState::Crashed);
            dispose(container, false);
        } else if verdict == ReturnVerdict::Dirty {
            lang.discarded += 1;
            container.transition(ContainerState::Retired);
            dispose(container, false);
        } else if retire {
            lang.retired += 1;
            container.transition(ContainerState::Retired);
            dispose(container, false);
        } else {
            container.transition(ContainerState::Warm);
            lang.warm.push_back(container);
        }
        self.top_up(&language, lang, stopped);
        drop(state);
        self.changed.notify_all();
    }

    /// One monitor pass: drop dead idle containers and refill.
    fn sweep(self: &Arc<Self>) -> bool {
        let mut state = self.lock();
        if state.stopped {
            return false;
        }
        let deadline = self.config.heartbeat_deadline;
        let mut changed = false;
        for (language, lang) in state.languages.iter_mut() {
            let mut kept = VecDeque::with_capacity(lang.warm.len());
            while let Some(mut c) = lang.warm.pop_front() {
                if c.is_alive(deadline) {
                    kept.push_back(c);
                } else {
                    tracing::info!(id = %c.id, "replacing dead container");
                    lang.crashes += 1;
                    c.transition(ContainerState::Crashed);
                    dispose(c, false);
                    changed = true;
                }
            }
            lang.warm = kept;
            self.top_up(language, lang, false);
        }
        drop(state);
        if changed {
            self.changed.notify_all();
        }
        true
    }
}

fn monitor(inner: Weak<Inner>) {
    loop {
        thread::sleep(MONITOR_TICK);
        let Some(inner) = inner.upgrade() else { return };
        if !inner.sweep() {
            return;
        }
    }
}

impl Pool {
    pub fn new(driver: Arc<dyn SandboxDriver>, config: PoolConfig) -> Result<Pool, SandboxError> {
        config.validate()?;
        let inner = Arc::new(Inner {
            driver,
            config,
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
            next_container: AtomicU64::new(0),
            next_job: AtomicU64::new(1),
            in_flight: Mutex::new(HashMap::new()),
            tag_violations: AtomicU64::new(0),
        });
        let weak = Arc::downgrade(&inner);
        thread::Builder::new()
            .name("pool-monitor".into())
            .spawn(move || monitor(weak))
            .map_err(|e| SandboxError::SpawnFailed(format!("monitor thread: {e}")))?;
        Ok(Pool { inner })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.inner.config
    }

    pub fn driver_name(&self) -> &'static str {
        self.inner.driver.name()
    }

    /// Ensures the image for `config` and starts filling its pool. Returns
    /// the image tag. Starting a language twice is a no-op.
    pub fn start_language(&self, config: &LanguageConfig) -> Result<String, SandboxError> {
        let language = config.language();
        let plan = build_plan(config);
        let image = self.inner.driver.ensure_image(&plan)?;
        let mut state = self.inner.lock();
        if state.stopped {
            return Err(SandboxError::PoolStopped);
        }
        let stopped = state.stopped;
        let lang = state
            .languages
            .entry(language.clone())
            .or_insert_with(|| Lang::new(image.clone()));
        self.inner.top_up(&language, lang, stopped);
        Ok(lang.image.clone())
    }

    pub fn languages(&self) -> Vec<String> {
        let mut names: Vec<_> = self.inner.lock().languages.keys().cloned().collect();
        names.sort();
        names
    }

    /// Maximum number of concurrent jobs for a language.
    pub fn capacity(&self) -> usize {
        self.inner.config.target_size_per_language
    }

    /// Blocks until the language has its full complement of live containers.
    pub fn wait_until_ready(&self, language: &str, timeout: Duration) -> Result<(), SandboxError> {
        let deadline = Instant::now() + timeout;
        let mut state = self.inner.lock();
        loop {
            if state.stopped {
                return Err(SandboxError::PoolStopped);
            }
            let lang = state
                .languages
                .get(language)
                .ok_or_else(|| SandboxError::UnknownLanguage(language.to_string()))?;
            if lang.live() >= self.inner.config.target_size_per_language {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(SandboxError::SpawnTimeout {
                    language: language.to_string(),
                    waited: timeout,
                });
            }
            let wait = (deadline - now).min(CHECKOUT_RECHECK);
            state = self
                .inner
                .changed
                .wait_timeout(state, wait)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Takes a warm container, waiting while all are busy. Fails with
    /// `SpawnTimeout` only when nothing is busy and no spawn succeeds in
    /// time.
    pub fn checkout(&self, language: &str) -> Result<ContainerHandle, SandboxError> {
        let inner = &self.inner;
        let mut state = inner.lock();
        let mut starved_since: Option<Instant> = None;
        loop {
            if state.stopped {
                return Err(SandboxError::PoolStopped);
            }
            let lang = state
                .languages
                .get_mut(language)
                .ok_or_else(|| SandboxError::UnknownLanguage(language.to_string()))?;
            while let Some(mut c) = lang.warm.pop_front() {
                if !c.is_alive(inner.config.heartbeat_deadline) {
                    lang.crashes += 1;
                    c.transition(ContainerState::Crashed);
                    dispose(c, false);
                    continue;
                }
                c.transition(ContainerState::Busy);
                lang.busy.insert(
                    c.id.clone(),
                    BusyEntry {
                        jobs_served: c.jobs_served,
                        host_pid: c.process.host_pid(),
                    },
                );
                return Ok(ContainerHandle {
                    container: Some(c),
                    inner: inner.clone(),
                    fresh: false,
                });
            }
            inner.top_up(language, lang, false);
            if lang.busy.is_empty() {
                let since = *starved_since.get_or_insert_with(Instant::now);
                if since.elapsed() >= inner.config.spawn_timeout {
                    return Err(SandboxError::SpawnTimeout {
                        language: language.to_string(),
                        waited: since.elapsed(),
                    });
                }
            } else {
                starved_since = None;
            }
            state = inner
                .changed
                .wait_timeout(state, CHECKOUT_RECHECK)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Starts a one-off container outside the pool; giving it back destroys
    /// it. Used to measure and serve fresh-container-per-job execution.
    pub fn spawn_fresh(&self, language: &str) -> Result<ContainerHandle, SandboxError> {
        let image = {
            let state = self.inner.lock();
            if state.stopped {
                return Err(SandboxError::PoolStopped);
            }
            state
                .languages
                .get(language)
                .map(|l| l.image.clone())
                .ok_or_else(|| SandboxError::UnknownLanguage(language.to_string()))?
        };
        let mut container = self.inner.start_container(language, &image)?;
        container.transition(ContainerState::Warm);
        container.transition(ContainerState::Busy);
        Ok(ContainerHandle {
            container: Some(container),
            inner: self.inner.clone(),
            fresh: true,
        })
    }

    pub fn metrics(&self) -> PoolMetrics {
        let state = self.inner.lock();
        let languages = state
            .languages
            .iter()
            .map(|(name, lang)| {
                (
                    name.clone(),
                    LanguageMetrics {
                        image: lang.image.clone(),
                        target: self.inner.config.target_size_per_language,
                        warm: lang.warm.len(),
                        busy: lang.busy.len(),
                        spawning: lang.spawning,
                        jobs_served: lang.jobs_served,
                        crashes: lang.crashes,
                        discarded: lang.discarded,
                        retired: lang.retired,
                        spawn_failures: lang.spawn_failures,
                        last_spawn_error: lang.last_spawn_error.clone(),
                    },
                )
            })
            .collect();
        PoolMetrics {
            driver: self.inner.driver.name().to_string(),
            stopped: state.stopped,
            languages,
            tag_violations: self.inner.tag_violations.load(Ordering::SeqCst),
        }
    }

    /// Live containers of a language, warm first.
    pub fn snapshot(&self, language: &str) -> Vec<ContainerInfo> {
        let state = self.inner.lock();
        let Some(lang) = state.languages.get(language) else {
            return Vec::new();
        };
        let mut out: Vec<ContainerInfo> = lang
            .warm
            .iter()
            .map(|c| ContainerInfo {
                id: c.id.clone(),
                state: c.state,
                jobs_served: c.jobs_served,
                host_pid: c.process.host_pid(),
            })
            .collect();
        let mut busy: Vec<_> = lang.busy.iter().collect();
        busy.sort_by(|a, b| a.0.cmp(b.0));
        out.extend(busy.into_iter().map(|(id, entry)| ContainerInfo {
            id: id.clone(),
            state: ContainerState::Busy,
            jobs_served: entry.jobs_served,
            host_pid: entry.host_pid,
        }));
        out
    }

    /// Stops the pool and kills idle containers. Busy containers are killed
    /// when their handles come back.
    pub fn shutdown(&self) {
        let idle: Vec<Container> = {
            let mut state = self.inner.lock();
            state.stopped = true;
            state
                .languages
                .values_mut()
                .flat_map(|l| l.warm.drain(..))
                .collect()
        };
        self.inner.changed.notify_all();
        for c in idle {
            dispose(c, true);
        }
    }
}

impl Drop for Pool {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Exclusive use of one container. Dropping the handle without
/// [`give_back`](Self::give_back) returns it as dirty.
pub struct ContainerHandle {
    container: Option<Container>,
    inner: Arc<Inner>,
    fresh: bool,
}

impl std::fmt::Debug for ContainerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContainerHandle")
            .field("id", &self.id())
            .field("language", &self.language())
            .field("fresh", &self.fresh)
            .finish()
    }
}

impl ContainerHandle {
    fn container(&self) -> &Container {
        self.container.as_ref().expect("handle already returned")
    }

    pub fn id(&self) -> &str {
        &self.container().id
    }

    pub fn language(&self) -> &str {
        &self.container().language
    }

    pub fn state(&self) -> ContainerState {
        self.container().state
    }

    pub fn jobs_served(&self) -> u64 {
        self.container().jobs_served
    }

    pub fn ram_disk_path(&self) -> &Path {
        &self.container().ram_disk_path
    }

    pub fn host_pid(&self) -> Option<u32> {
        self.container().process.host_pid()
    }

    pub fn is_fresh(&self) -> bool {
        self.fresh
    }

    /// Runs one job. The container is tagged with the job id for the
    /// duration; a container already carrying a tag refuses the job.
    pub fn run_job(&mut self, request: &JobRequest) -> Result<JobReport, HarnessError> {
        let inner = self.inner.clone();
        let job = inner.next_job.fetch_add(1, Ordering::SeqCst);
        let container = self.container.as_mut().expect("handle already returned");
        {
            let mut in_flight = inner.in_flight.lock().unwrap_or_else(|p| p.into_inner());
            if let Some(other) = in_flight.get(&container.id) {
                inner.tag_violations.fetch_add(1, Ordering::SeqCst);
                return Err(HarnessError::Protocol(format!(
                    "container {} already runs job {other}",
                    container.id
                )));
            }
            in_flight.insert(container.id.clone(), job);
        }
        let result = container.connection.run_job(request);
        inner
            .in_flight
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&container.id);
        result
    }

    pub fn give_back(mut self, verdict: ReturnVerdict) {
        if let Some(container) = self.container.take() {
            self.inner.give_back(container, verdict, self.fresh);
        }
    }
}

impl Drop for ContainerHandle {
    fn drop(&mut self) {
        if let Some(container) = self.container.take() {
            self.inner.give_back(container, ReturnVerdict::Dirty, self.fresh);
        }
    }
}
