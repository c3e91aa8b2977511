//! Minimal client for chat-completions style HTTP endpoints.
//!
//! Used for task reformulation and for sampling evaluation completions. The
//! wire format is the common one: `POST {model, messages:[{role, content}]}`
//! answered by `{choices:[{message:{content}}]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("environment variable {0} is not set")]
    MissingToken(String),
}

impl EndpointError {
    fn retryable(&self) -> bool {
        match self {
            EndpointError::Transport(_) => true,
            EndpointError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Full URL of the chat-completions route.
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub token_env: Option<String>,
    /// Header the token is sent in; `Authorization` gets a `Bearer ` prefix.
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_auth_header() -> String {
    "Authorization".to_string()
}

fn default_timeout_secs() -> u64 {
    600
}

fn default_retries() -> u32 {
    3
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            token_env: None,
            auth_header: default_auth_header(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Anything that can answer a chat prompt. Tests plug in canned responders.
pub trait ChatEndpoint: Send + Sync {
    /// Returns `n` sampled completions for `messages`.
    fn complete(
        &self,
        messages: &[ChatMessage],
        n: u32,
        temperature: Option<f64>,
    ) -> Result<Vec<String>, EndpointError>;
}

impl<F> ChatEndpoint for F
where
    F: Fn(&[ChatMessage]) -> Result<String, EndpointError> + Send + Sync,
{
    fn complete(
        &self,
        messages: &[ChatMessage],
        n: u32,
        _temperature: Option<f64>,
    ) -> Result<Vec<String>, EndpointError> {
        (0..n).map(|_| self(messages)).collect()
    }
}

pub struct HttpChatEndpoint {
    config: EndpointConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatEndpoint {
    pub fn new(config: EndpointConfig) -> Result<Self, EndpointError> {
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| EndpointError::MissingToken(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            token,
            client,
        })
    }

    fn request_once(&self, body: &Value) -> Result<Vec<String>, EndpointError> {
        let mut request = self.client.post(&self.config.url).json(body);
        if let Some(token) = &self.token {
            let value = if self.config.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {token}")
            } else {
                token.clone()
            };
            request = request.header(self.config.auth_header.as_str(), value);
        }
        let response = request
            .send()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(EndpointError::Status {
                status: status.as_u16(),
                body: text.chars().take(2000).collect(),
            });
        }
        parse_choices(&text)
    }
}

/// Extracts the text of every choice from a chat-completions response body.
pub fn parse_choices(body: &str) -> Result<Vec<String>, EndpointError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| EndpointError::Malformed(e.to_string()))?;
    let choices = value
        .get("choices")
        .and_then(Value::as_array)
        .filter(|c| !c.is_empty())
        .ok_or_else(|| EndpointError::Malformed("missing `choices` array".into()))?;
    choices
        .iter()
        .map(|choice| {
            choice
                .pointer("/message/content")
                .or_else(|| choice.get("text"))
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| EndpointError::Malformed("choice without text content".into()))
        })
        .collect()
}

impl ChatEndpoint for HttpChatEndpoint {
    fn complete(
        &self,
        messages: &[ChatMessage],
        n: u32,
        temperature: Option<f64>,
    ) -> Result<Vec<String>, EndpointError> {
        let mut body = json!({ "model": self.config.model, "messages": messages });
        if n != 1 {
            body["n"] = json!(n);
        }
        if let Some(t) = temperature {
            body["temperature"] = json!(t);
        }
        let mut attempt = 0;
        loop {
            match self.request_once(&body) {
                Err(e) if e.retryable() && attempt < self.config.max_retries => {
                    attempt += 1;
                    let backoff = Duration::from_millis(250 * 2u64.pow(attempt.min(6)));
                    tracing::warn!(error = %e, attempt, "endpoint request failed; retrying");
                    std::thread::sleep(backoff);
                }
                other => return other,
            }
        }
    }
}
