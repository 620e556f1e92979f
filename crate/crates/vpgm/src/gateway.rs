//! Uniform provider abstraction over LLM backends.
//!
//! One [`Gateway`] serves both a JSON-over-HTTP chat-completions client (for
//! hosted or local models) and a deterministic scripted mock (for tests and
//! offline runs). All completions flow through a counting semaphore so at
//! most `max_parallel` requests are in flight, batches preserve input order,
//! and transient HTTP failures (429, 5xx, timeouts) are retried with full-
//! jitter exponential backoff.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

/// Default name of the environment variable holding the API key.
pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";

/// First backoff delay bound; doubles per retry up to [`BACKOFF_CAP_MS`].
const BACKOFF_BASE_MS: u64 = 500;
const BACKOFF_CAP_MS: u64 = 30_000;

mod duration_millis {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Connection settings for one provider.
///
/// Secrets never appear here: `api_key_env` names an environment variable,
/// and the key (if the variable is set) is read at gateway construction. An
/// unset variable means anonymous access, which local model servers accept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(rename = "timeout_ms", with = "duration_millis")]
    pub timeout: Duration,
    /// Extra attempts after the first, for transient failures only.
    pub max_retries: u32,
    /// Upper bound on concurrently in-flight requests.
    pub max_parallel: usize,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "llama3-8b-instruct".into(),
            temperature: 0.7,
            max_tokens: 512,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            max_parallel: 4,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidConfig(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_parallel < 1 {
            return Err(GatewayError::InvalidConfig("max_parallel must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(GatewayError::InvalidConfig("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// One prompt to complete. `scenario_key` identifies the request to the mock
/// backend (by convention `<question_id>/<sample_index>`); the HTTP backend
/// ignores it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub scenario_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    /// Reply text; non-empty on success.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(rename = "latency_ms", with = "duration_millis")]
    pub latency: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("mock script {path}: {message}")]
    Script { path: PathBuf, message: String },
    #[error("provider error{}: {message}", .status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { retryable: bool, status: Option<u16>, message: String },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    ExhaustedRetries {
        attempts: u32,
        #[source]
        last: Box<GatewayError>,
    },
    #[error("provider returned an empty reply")]
    EmptyReply,
}

/// Canned replies keyed by scenario, with an optional catch-all.
///
/// On disk this is a flat JSON map; the key `"default"` is reserved for the
/// catch-all reply. Lookups are pure, so identical scripts and requests yield
/// identical responses on every platform.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockScript {
    replies: BTreeMap<String, String>,
    default_reply: Option<String>,
}

impl MockScript {
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Script {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let map: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| GatewayError::Script {
                path: path.to_path_buf(),
                message: format!("not a JSON map of scenario key to reply text: {e}"),
            })?;
        Ok(Self::from_map(map))
    }

    pub fn from_map(mut map: BTreeMap<String, String>) -> Self {
        let default_reply = map.remove("default");
        MockScript { replies: map, default_reply }
    }

    /// Adds or replaces the reply for one scenario key.
    pub fn insert(&mut self, key: impl Into<String>, reply: impl Into<String>) -> &mut Self {
        self.replies.insert(key.into(), reply.into());
        self
    }

    pub fn set_default(&mut self, reply: impl Into<String>) -> &mut Self {
        self.default_reply = Some(reply.into());
        self
    }

    pub fn lookup(&self, key: &str) -> Option<&str> {
        self.replies.get(key).map(String::as_str).or(self.default_reply.as_deref())
    }
}

enum Backend {
    Mock(MockScript),
    Http { client: reqwest::Client, api_key: Option<String> },
}

/// A shareable completion client. Clone-free sharing via `&Gateway` is safe:
/// the only mutable state is the admission semaphore.
pub struct Gateway {
    config: ProviderConfig,
    backend: Backend,
    limiter: Arc<Semaphore>,
}

impl Gateway {
    /// A gateway that answers from `script` without any I/O.
    pub fn mock(config: ProviderConfig, script: MockScript) -> Result<Self, GatewayError> {
        config.validate()?;
        let limiter = Arc::new(Semaphore::new(config.max_parallel));
        Ok(Gateway { config, backend: Backend::Mock(script), limiter })
    }

    /// An HTTP gateway; reads the bearer token from the environment variable
    /// named by `config.api_key_env` (absent means anonymous access).
    pub fn http(config: ProviderConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::InvalidConfig(format!("cannot build HTTP client: {e}")))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let limiter = Arc::new(Semaphore::new(config.max_parallel));
        Ok(Gateway { config, backend: Backend::Http { client, api_key }, limiter })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Completes one request, holding an admission permit for the whole call
    /// (retries included).
    pub async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        let _permit = self.limiter.acquire().await.expect("admission semaphore is never closed");
        self.complete_admitted(request).await
    }

    /// Completes every request with at most `max_parallel` in flight; the
    /// output index always corresponds to the input index, and per-item
    /// failures are reported in place rather than aborting the batch.
    pub async fn complete_batch(
        &self,
        requests: &[CompletionRequest],
    ) -> Vec<Result<CompletionResponse, GatewayError>> {
        futures::future::join_all(requests.iter().map(|r| self.complete(r))).await
    }

    async fn complete_admitted(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        match &self.backend {
            Backend::Mock(script) => match script.lookup(&request.scenario_key) {
                Some(text) if !text.is_empty() => Ok(CompletionResponse {
                    text: text.to_string(),
                    prompt_tokens: None,
                    completion_tokens: None,
                    latency: Duration::ZERO,
                }),
                Some(_) => Err(GatewayError::EmptyReply),
                None => Err(GatewayError::Provider {
                    retryable: false,
                    status: None,
                    message: format!(
                        "no scripted reply for key {:?} and no default",
                        request.scenario_key
                    ),
                }),
            },
            Backend::Http { client, api_key } => {
                self.complete_http(client, api_key.as_deref(), request).await
            }
        }
    }

    async fn complete_http(
        &self,
        client: &reqwest::Client,
        api_key: Option<&str>,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = seed.into();
        }

        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            match try_once(client, &url, &body, api_key).await {
                Ok(response) => return Ok(response),
                Err(err) => {
                    let retryable = matches!(err, GatewayError::Provider { retryable: true, .. });
                    if !retryable {
                        return Err(err);
                    }
                    if attempt > self.config.max_retries {
                        return Err(GatewayError::ExhaustedRetries {
                            attempts: attempt,
                            last: Box::new(err),
                        });
                    }
                    let delay = backoff_delay(attempt);
                    log::warn!(
                        "transient provider failure (attempt {attempt}), retrying in {delay:?}: {err}"
                    );
                    tokio::time::sleep(delay).await;
                }
            }
        }
    }
}

/// Full-jitter exponential backoff: uniform in [0, min(cap, base·2^(n−1))].
fn backoff_delay(attempt: u32) -> Duration {
    let doublings = (attempt - 1).min(20);
    let ceiling = BACKOFF_BASE_MS.saturating_mul(1 << doublings).min(BACKOFF_CAP_MS);
    Duration::from_millis(rand::rng().random_range(0..=ceiling))
}

async fn try_once(
    client: &reqwest::Client,
    url: &str,
    body: &serde_json::Value,
    api_key: Option<&str>,
) -> Result<CompletionResponse, GatewayError> {
    let started = Instant::now();
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let response = req.send().await.map_err(|e| GatewayError::Provider {
        retryable: e.is_timeout() || e.is_connect(),
        status: e.status().map(|s| s.as_u16()),
        message: e.to_string(),
    })?;

    let status = response.status();
    if status.as_u16() == 429 || status.is_server_error() {
        return Err(GatewayError::Provider {
            retryable: true,
            status: Some(status.as_u16()),
            message: format!("transient HTTP status {status}"),
        });
    }
    if !status.is_success() {
        let text = response.text().await.unwrap_or_default();
        return Err(GatewayError::Provider {
            retryable: false,
            status: Some(status.as_u16()),
            message: format!(
                "HTTP status {status}: {}",
                text.chars().take(200).collect::<String>()
            ),
        });
    }

    let value: serde_json::Value = response.json().await.map_err(|e| GatewayError::Provider {
        retryable: false,
        status: Some(status.as_u16()),
        message: format!("malformed response body: {e}"),
    })?;
    let text =
        value.pointer("/choices/0/message/content").and_then(|v| v.as_str()).unwrap_or_default();
    if text.is_empty() {
        return Err(GatewayError::EmptyReply);
    }
    Ok(CompletionResponse {
        text: text.to_string(),
        prompt_tokens: value.pointer("/usage/prompt_tokens").and_then(|v| v.as_u64()),
        completion_tokens: value.pointer("/usage/completion_tokens").and_then(|v| v.as_u64()),
        latency: started.elapsed(),
    })
}
