//! HTTP client for model services.
//!
//! Wire protocol:
//!
//! * `POST /v1/generate` and `POST /v1/loglikelihood` take a
//!   [`GenerationRequest`] body and return a [`GenerationResponse`].
//! * `GET /health` returns [`Health`].
//!
//! Any backend speaking this protocol (a local server, a proxy in front of
//! a hosted API, the bundled mock) is treated the same way.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, Stream, StreamExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::prompting::EvalMode;

/// Environment variable holding the default model endpoint.
pub const ENDPOINT_ENV: &str = "EVAL_ENDPOINT";
pub const API_KEY_ENV: &str = "EVAL_API_KEY";
pub const GENERATE_ROUTE: &str = "/v1/generate";
pub const LOGLIKELIHOOD_ROUTE: &str = "/v1/loglikelihood";
pub const HEALTH_ROUTE: &str = "/health";
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens: 512,
            stop: Vec::new(),
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!(
                "temperature {} must be non-negative",
                self.temperature
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} must lie in (0, 1]", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub instance_id: String,
    pub prompt: String,
    pub params: GenerationParams,
    /// Carried by the route, not the body.
    #[serde(skip)]
    pub mode: EvalMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub continuations: Vec<String>,
}

impl GenerationRequest {
    pub fn generation(
        instance_id: impl Into<String>,
        prompt: impl Into<String>,
        params: GenerationParams,
    ) -> Self {
        Self {
            instance_id: instance_id.into(),
            prompt: prompt.into(),
            params,
            mode: EvalMode::Generation,
            continuations: Vec::new(),
        }
    }

    pub fn loglikelihood(
        instance_id: impl Into<String>,
        context: impl Into<String>,
        continuations: Vec<String>,
        params: GenerationParams,
    ) -> Self {
        Self {
            instance_id: instance_id.into(),
            prompt: context.into(),
            params,
            mode: EvalMode::Loglikelihood,
            continuations,
        }
    }

    pub fn route(&self) -> &'static str {
        match self.mode {
            EvalMode::Generation => GENERATE_ROUTE,
            EvalMode::Loglikelihood => LOGLIKELIHOOD_ROUTE,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.params.validate()?;
        match (self.mode, self.continuations.is_empty()) {
            (EvalMode::Generation, false) => {
                Err("generation requests must not carry continuations".into())
            }
            (EvalMode::Loglikelihood, true) => {
                Err("loglikelihood requests need at least one continuation".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub instance_id: String,
    pub text: Option<String>,
    pub logprob_sums: Option<Vec<f64>>,
    pub token_counts: Option<Vec<u32>>,
    pub finish_reason: FinishReason,
    /// Client-side measurements; never on the wire.
    #[serde(skip)]
    pub latency_ms: f64,
    #[serde(skip)]
    pub attempts: u32,
    /// Set on client-materialized failures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationResponse {
    pub fn text(
        instance_id: impl Into<String>,
        text: impl Into<String>,
        finish: FinishReason,
    ) -> Self {
        Self {
            instance_id: instance_id.into(),
            text: Some(text.into()),
            logprob_sums: None,
            token_counts: None,
            finish_reason: finish,
            latency_ms: 0.0,
            attempts: 0,
            error: None,
        }
    }

    pub fn scores(
        instance_id: impl Into<String>,
        logprob_sums: Vec<f64>,
        token_counts: Vec<u32>,
    ) -> Self {
        Self {
            instance_id: instance_id.into(),
            text: None,
            logprob_sums: Some(logprob_sums),
            token_counts: Some(token_counts),
            finish_reason: FinishReason::Stop,
            latency_ms: 0.0,
            attempts: 0,
            error: None,
        }
    }

    /// A permanently failed request, materialized so no id goes missing.
    pub fn failed(instance_id: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            instance_id: instance_id.into(),
            text: None,
            logprob_sums: None,
            token_counts: None,
            finish_reason: FinishReason::Error,
            latency_ms: 0.0,
            attempts: 0,
            error: Some(error.into()),
        }
    }

    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub model_name: String,
    pub ready: bool,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Coarse failure classes a retry policy can opt into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusClass {
    Transport,
    ClientError,
    ServerError,
    Protocol,
}

impl GatewayError {
    pub fn class(&self) -> Option<StatusClass> {
        match self {
            GatewayError::Transport(_) => Some(StatusClass::Transport),
            GatewayError::Backend { status, .. } if *status >= 500 => {
                Some(StatusClass::ServerError)
            }
            GatewayError::Backend { .. } => Some(StatusClass::ClientError),
            GatewayError::Protocol(_) => Some(StatusClass::Protocol),
            GatewayError::InvalidRequest(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: f64,
    pub backoff_cap_ms: f64,
    pub retryable: BTreeSet<StatusClass>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 200.0,
            backoff_cap_ms: 10_000.0,
            retryable: [StatusClass::Transport, StatusClass::ServerError]
                .into_iter()
                .collect(),
        }
    }
}

impl RetryPolicy {
    pub fn is_retryable(&self, err: &GatewayError) -> bool {
        err.class().is_some_and(|c| self.retryable.contains(&c))
    }

    /// Upper bound of the wait before retry number `retry` (1-based):
    /// `min(cap, base * 2^(retry-1))`.
    pub fn backoff_ceiling_ms(&self, retry: u32) -> f64 {
        let exp = retry.saturating_sub(1).min(62);
        (self.backoff_base_ms * 2f64.powi(exp as i32)).min(self.backoff_cap_ms)
    }

    /// Full-jitter wait: uniform in `[0, ceiling]`.
    pub fn backoff_delay<R: Rng + ?Sized>(&self, retry: u32, rng: &mut R) -> Duration {
        let ceiling = self.backoff_ceiling_ms(retry);
        let ms = if ceiling > 0.0 {
            rng.gen_range(0.0..=ceiling)
        } else {
            0.0
        };
        Duration::from_secs_f64(ms / 1000.0)
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub request_timeout: Duration,
    pub health_timeout: Duration,
    pub bearer_token: Option<String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
            health_timeout: Duration::from_secs(5),
            bearer_token: None,
        }
    }
}

/// Shareable client bound to one endpoint.
#[derive(Debug, Clone)]
pub struct GatewayClient {
    http: reqwest::Client,
    endpoint: Arc<str>,
    config: Arc<GatewayConfig>,
}

impl GatewayClient {
    pub fn new(endpoint: &str) -> Self {
        Self::with_config(endpoint, GatewayConfig::default())
    }

    pub fn with_config(endpoint: &str, config: GatewayConfig) -> Self {
        let http = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .expect("reqwest client without TLS always builds");
        Self {
            http,
            endpoint: endpoint.trim_end_matches('/').into(),
            config: Arc::new(config),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn url(&self, route: &str) -> String {
        format!("{}{}", self.endpoint, route)
    }

    fn authorize(&self, req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.config.bearer_token {
            Some(token) => req.bearer_auth(token),
            None => req,
        }
    }

    /// One attempt, no retries.
    pub async fn generate(
        &self,
        req: &GenerationRequest,
    ) -> Result<GenerationResponse, GatewayError> {
        req.validate().map_err(GatewayError::InvalidRequest)?;
        let started = Instant::now();
        let resp = self
            .authorize(self.http.post(self.url(req.route())))
            .json(req)
            .send()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .text()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Backend {
                status: status.as_u16(),
                body,
            });
        }
        let mut parsed: GenerationResponse =
            serde_json::from_str(&body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
        check_response(req, &parsed)?;
        if let Some(text) = parsed.text.as_mut() {
            if let Some(cut) = first_stop(text, &req.params.stop) {
                text.truncate(cut);
                parsed.finish_reason = FinishReason::Stop;
            }
        }
        parsed.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        parsed.attempts = 1;
        Ok(parsed)
    }

    /// Retries retryable failures with full-jitter backoff. Never fails:
    /// exhausted or permanent errors come back as an error response.
    pub async fn generate_with_retry(
        &self,
        req: &GenerationRequest,
        policy: &RetryPolicy,
    ) -> GenerationResponse {
        let started = Instant::now();
        let max_attempts = policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.generate(req).await {
                Ok(mut resp) => {
                    resp.attempts = attempt;
                    resp.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
                    return resp;
                }
                Err(err) if attempt < max_attempts && policy.is_retryable(&err) => {
                    let delay = policy.backoff_delay(attempt, &mut rand::thread_rng());
                    tracing::debug!(id = %req.instance_id, attempt, ?delay, %err, "retrying");
                    tokio::time::sleep(delay).await;
                }
                Err(err) => {
                    tracing::warn!(id = %req.instance_id, attempt, %err, "request failed");
                    let mut resp = GenerationResponse::failed(&req.instance_id, err.to_string());
                    resp.attempts = attempt;
                    resp.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
                    return resp;
                }
            }
        }
    }

    /// Sends every request with at most `concurrency` in flight. Yields
    /// exactly one response per request, in completion order.
    pub fn dispatch_batch<S>(
        &self,
        reqs: S,
        concurrency: usize,
        policy: RetryPolicy,
    ) -> impl Stream<Item = GenerationResponse> + Send + 'static
    where
        S: Stream<Item = GenerationRequest> + Send + 'static,
    {
        let client = self.clone();
        let policy = Arc::new(policy);
        reqs.map(move |req| {
            let client = client.clone();
            let policy = Arc::clone(&policy);
            async move { client.generate_with_retry(&req, &policy).await }
        })
        .buffer_unordered(concurrency.max(1))
    }

    pub async fn probe_health(&self) -> Health {
        let fallback = || Health {
            model_name: String::new(),
            ready: false,
        };
        let resp = self
            .authorize(self.http.get(self.url(HEALTH_ROUTE)))
            .timeout(self.config.health_timeout)
            .send()
            .await;
        match resp {
            Ok(r) if r.status().is_success() => {
                r.json::<Health>().await.unwrap_or_else(|_| fallback())
            }
            _ => fallback(),
        }
    }
}

/// Convenience wrapper over [`GatewayClient::generate`].
pub async fn generate(
    endpoint: &str,
    req: &GenerationRequest,
) -> Result<GenerationResponse, GatewayError> {
    GatewayClient::new(endpoint).generate(req).await
}

/// Convenience wrapper over [`GatewayClient::dispatch_batch`] for an
/// in-memory batch.
pub fn dispatch_batch(
    endpoint: &str,
    reqs: Vec<GenerationRequest>,
    concurrency: usize,
    policy: RetryPolicy,
) -> impl Stream<Item = GenerationResponse> + Send + 'static {
    GatewayClient::new(endpoint).dispatch_batch(stream::iter(reqs), concurrency, policy)
}

pub async fn probe_health(endpoint: &str) -> Health {
    GatewayClient::new(endpoint).probe_health().await
}

fn first_stop(text: &str, stops: &[String]) -> Option<usize> {
    stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
}

fn check_response(req: &GenerationRequest, resp: &GenerationResponse) -> Result<(), GatewayError> {
    if resp.instance_id != req.instance_id {
        return Err(GatewayError::Protocol(format!(
            "response for {:?} answered request {:?}",
            resp.instance_id, req.instance_id
        )));
    }
    match req.mode {
        EvalMode::Generation => {
            if resp.text.is_none() || resp.logprob_sums.is_some() {
                return Err(GatewayError::Protocol(
                    "generation response must carry text and no logprobs".into(),
                ));
            }
        }
        EvalMode::Loglikelihood => {
            let n = req.continuations.len();
            let sums = resp.logprob_sums.as_ref().map(Vec::len);
            let counts = resp.token_counts.as_ref().map(Vec::len);
            if resp.text.is_some() || sums != Some(n) || counts != Some(n) {
                return Err(GatewayError::Protocol(format!(
                    "loglikelihood response must carry {n} logprob sums and token counts"
                )));
            }
        }
    }
    Ok(())
}
