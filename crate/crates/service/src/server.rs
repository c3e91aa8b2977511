//! HTTP API over a verifier and its pool.

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use polyjudge_core::langconfig::{load_config, LanguageConfig};
use polyjudge_core::rlmath::{group_advantages, GroupRewards};
use polyjudge_core::sandbox::{Pool, PoolMetrics};
use polyjudge_core::taskset::Task;
use polyjudge_core::verifier::{canonical_language, Candidate, Verdict, Verifier, VerifyOptions};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ServiceConfig;
use crate::driver::make_driver;

const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

/// Admission control in units of candidates.
///
/// The pool already caps how many jobs execute at once; this caps how many
/// more may wait, so overload turns into 429s rather than unbounded queues.
#[derive(Debug)]
struct Admission {
    limit: usize,
    in_flight: AtomicUsize,
}

struct Permit {
    admission: Arc<Admission>,
    n: usize,
}

impl Admission {
    /// A request larger than the whole limit is still admitted when nothing
    /// else is in flight, so no group size is permanently refused.
    fn try_admit(self: &Arc<Self>, n: usize) -> Option<Permit> {
        let mut current = self.in_flight.load(Ordering::SeqCst);
        loop {
            if current > 0 && current + n > self.limit {
                return None;
            }
            match self.in_flight.compare_exchange(
                current,
                current + n,
                Ordering::SeqCst,
                Ordering::SeqCst,
            ) {
                Ok(_) => {
                    return Some(Permit {
                        admission: self.clone(),
                        n,
                    })
                }
                Err(actual) => current = actual,
            }
        }
    }
}

impl Drop for Permit {
    fn drop(&mut self) {
        self.admission.in_flight.fetch_sub(self.n, Ordering::SeqCst);
    }
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    rejected: AtomicU64,
    candidates: AtomicU64,
}

pub struct AppState {
    verifier: Verifier,
    languages: BTreeMap<String, LanguageConfig>,
    defaults: VerifyOptions,
    admission: Arc<Admission>,
    counters: Counters,
}

impl AppState {
    /// Wraps an already started pool. `languages` must all be started.
    pub fn new(
        pool: Arc<Pool>,
        languages: Vec<LanguageConfig>,
        defaults: VerifyOptions,
        queue_bound: usize,
    ) -> Arc<Self> {
        // Each language pool runs up to `capacity` jobs at once.
        let limit = pool.capacity() * languages.len().max(1) + queue_bound;
        Arc::new(Self {
            verifier: Verifier::new(pool).with_options(defaults.clone()),
            languages: languages.into_iter().map(|c| (c.language(), c)).collect(),
            defaults,
            admission: Arc::new(Admission {
                limit,
                in_flight: AtomicUsize::new(0),
            }),
            counters: Counters::default(),
        })
    }

    /// Builds images, starts pools and waits until each language has a
    /// warm container.
    pub fn start(config: &ServiceConfig) -> anyhow::Result<Arc<Self>> {
        let driver = make_driver(config.driver, config.agent_binary.as_deref())?;
        let pool = Arc::new(Pool::new(driver, config.pool.clone())?);
        let mut languages = Vec::new();
        for path in &config.languages {
            let language = load_config(path)?;
            let image = pool.start_language(&language)?;
            tracing::info!(language = %language.language(), %image, "language started");
            languages.push(language);
        }
        for language in &languages {
            pool.wait_until_ready(&language.language(), config.pool.spawn_timeout)?;
        }
        Ok(Self::new(
            pool,
            languages,
            config.verify.clone(),
            config.queue_bound,
        ))
    }

    pub fn pool(&self) -> &Arc<Pool> {
        self.verifier.pool()
    }

    fn language(&self, name: &str) -> Result<&LanguageConfig, ApiError> {
        self.languages
            .get(&canonical_language(name))
            .or_else(|| self.languages.get(name))
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::NOT_FOUND,
                    "unknown_language",
                    format!("language `{name}` is not served"),
                )
            })
    }

    /// Request options are applied field by field over the server defaults.
    fn options(&self, overrides: Option<Value>) -> Result<VerifyOptions, ApiError> {
        let Some(overrides) = overrides else {
            return Ok(self.defaults.clone());
        };
        let Value::Object(fields) = overrides else {
            return Err(ApiError::bad_request("options must be an object"));
        };
        let mut merged = serde_json::to_value(&self.defaults).expect("options serialize");
        if let Value::Object(base) = &mut merged {
            base.extend(fields);
        }
        serde_json::from_value(merged).map_err(|e| ApiError::bad_request(format!("options: {e}")))
    }

    fn admit(&self, n: usize) -> Result<Permit, ApiError> {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        self.admission.try_admit(n).ok_or_else(|| {
            self.counters.rejected.fetch_add(1, Ordering::Relaxed);
            ApiError::new(
                StatusCode::TOO_MANY_REQUESTS,
                "overloaded",
                "verification queue is full".to_string(),
            )
        })
    }

    pub fn shutdown(&self) {
        self.pool().shutdown();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: String) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message,
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRequest {
    pub task: Task,
    pub language: String,
    pub completion_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyGroupRequest {
    pub task: Task,
    pub language: String,
    pub completions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantagesRequest {
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantagesResponse {
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub languages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub name: String,
    pub image: String,
    pub filename: String,
    pub compiled: bool,
    pub execute: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub requests: u64,
    pub rejected: u64,
    pub candidates_verified: u64,
    /// Candidates admitted and not yet answered.
    pub in_flight: usize,
    pub admission_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub pool: PoolMetrics,
    pub service: ServiceMetrics,
}

fn task_is_valid(task: &Task) -> Result<(), ApiError> {
    task.validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_task", e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            format!("verification worker failed: {e}"),
        )
    })
}

async fn verify(
    State(state): State<Arc<AppState>>,
    Json(request): Json<VerifyRequest>,
) -> Result<Json<Verdict>, ApiError> {
    let config = state.language(&request.language)?.clone();
    task_is_valid(&request.task)?;
    let options = state.options(request.options)?;
    let permit = state.admit(1)?;
    let worker = state.clone();
    let verdict = blocking(move || {
        let _permit = permit;
        let candidate = Candidate::new(request.completion_text, &config.language());
        worker
            .verifier
            .verify_with(&candidate, &request.task, &config, &options)
    })
    .await?;
    state.counters.candidates.fetch_add(1, Ordering::Relaxed);
    Ok(Json(verdict))
}

async fn verify_group(
    State(state): State<Arc<AppState>>,
    Json(request): Json<VerifyGroupRequest>,
) -> Result<Json<Vec<Verdict>>, ApiError> {
    let config = state.language(&request.language)?.clone();
    task_is_valid(&request.task)?;
    if request.completions.is_empty() {
        return Err(ApiError::bad_request("completions must not be empty"));
    }
    let options = state.options(request.options)?;
    let n = request.completions.len();
    let permit = state.admit(n)?;
    let worker = state.clone();
    let verdicts = blocking(move || {
        let _permit = permit;
        let language = config.language();
        let candidates: Vec<Candidate> = request
            .completions
            .into_iter()
            .map(|text| Candidate::new(text, &language))
            .collect();
        worker
            .verifier
            .verify_group_with(&candidates, &request.task, &config, &options)
    })
    .await?;
    state.counters.candidates.fetch_add(n as u64, Ordering::Relaxed);
    Ok(Json(verdicts))
}

async fn advantages(
    Json(request): Json<AdvantagesRequest>,
) -> Result<Json<AdvantagesResponse>, ApiError> {
    let rewards = GroupRewards::new(request.rewards).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(AdvantagesResponse {
        advantages: group_advantages(&rewards),
    }))
}

async fn languages(State(state): State<Arc<AppState>>) -> Json<Vec<LanguageInfo>> {
    let metrics = state.pool().metrics();
    Json(
        state
            .languages
            .iter()
            .map(|(name, config)| LanguageInfo {
                name: name.clone(),
                image: metrics
                    .languages
                    .get(name)
                    .map(|m| m.image.clone())
                    .unwrap_or_default(),
                filename: config.filename.clone(),
                compiled: config.compile.is_some(),
                execute: config.execute.clone(),
            })
            .collect(),
    )
}

async fn health(State(state): State<Arc<AppState>>) -> (StatusCode, Json<HealthResponse>) {
    let stopped = state.pool().metrics().stopped;
    let status = if stopped {
        StatusCode::SERVICE_UNAVAILABLE
    } else {
        StatusCode::OK
    };
    (
        status,
        Json(HealthResponse {
            status: if stopped { "stopped" } else { "ok" }.into(),
            languages: state.languages.keys().cloned().collect(),
        }),
    )
}

async fn metrics(State(state): State<Arc<AppState>>) -> Json<MetricsResponse> {
    Json(MetricsResponse {
        pool: state.pool().metrics(),
        service: ServiceMetrics {
            requests: state.counters.requests.load(Ordering::Relaxed),
            rejected: state.counters.rejected.load(Ordering::Relaxed),
            candidates_verified: state.counters.candidates.load(Ordering::Relaxed),
            in_flight: state.admission.in_flight.load(Ordering::SeqCst),
            admission_limit: state.admission.limit,
        },
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/verify", post(verify))
        .route("/v1/verify_group", post(verify_group))
        .route("/v1/advantages", post(advantages))
        .route("/v1/languages", get(languages))
        .route("/v1/health", get(health))
        .route("/v1/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then stops the pool.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let result = axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await;
    let pool_state = state.clone();
    let _ = tokio::task::spawn_blocking(move || pool_state.shutdown()).await;
    result
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut signal) => {
                signal.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    tokio::select! {
        _ = interrupt => {},
        _ = terminate => {},
    }
    tracing::info!("shutting down");
}
