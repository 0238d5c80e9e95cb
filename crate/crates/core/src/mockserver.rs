//! Scripted reference backend speaking the gateway wire protocol.
//!
//! Used for hermetic tests and demos: echo, scripted answers, fault
//! injection, and a bounded worker pool standing in for a multi-process
//! model server. `GET /stats` exposes the admission high-watermark and
//! per-id attempt counters.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Semaphore};
use tokio::task::JoinHandle;

use crate::gateway::{
    FinishReason, GenerationRequest, GenerationResponse, Health, GENERATE_ROUTE, HEALTH_ROUTE,
    LOGLIKELIHOOD_ROUTE,
};
use crate::prompting::EvalMode;

pub const UNSCRIPTED: &str = "UNSCRIPTED";
/// Logprob bonus given to the scripted continuation.
pub const SCRIPTED_BONUS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    #[default]
    Echo,
    Scripted,
    /// Scripted answers where present, echo otherwise.
    Fault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub instance_id: String,
    /// 1-based attempt number on which to fail.
    pub attempt: u32,
    pub status: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub mode: MockMode,
    pub model_name: String,
    pub answers: BTreeMap<String, String>,
    /// Checked in every mode.
    pub faults: Vec<Fault>,
    pub service_time_ms: f64,
    pub workers: usize,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            mode: MockMode::Echo,
            model_name: "mock-echo".into(),
            answers: BTreeMap::new(),
            faults: Vec::new(),
            service_time_ms: 0.0,
            workers: 8,
        }
    }
}

impl MockScript {
    pub fn echo() -> Self {
        Self::default()
    }

    pub fn scripted<I, K, V>(answers: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            mode: MockMode::Scripted,
            model_name: "mock-scripted".into(),
            answers: answers
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            ..Self::default()
        }
    }

    fn fault_for(&self, id: &str, attempt: u32) -> Option<u16> {
        self.faults
            .iter()
            .find(|f| f.instance_id == id && f.attempt == attempt)
            .map(|f| f.status)
    }

    fn answer_for(&self, req: &GenerationRequest) -> String {
        match self.mode {
            MockMode::Echo => req.prompt.clone(),
            MockMode::Scripted => self
                .answers
                .get(&req.instance_id)
                .cloned()
                .unwrap_or_else(|| UNSCRIPTED.to_string()),
            MockMode::Fault => self
                .answers
                .get(&req.instance_id)
                .cloned()
                .unwrap_or_else(|| req.prompt.clone()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Snapshot of the mock's counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockStats {
    pub max_inflight: usize,
    pub attempts: BTreeMap<String, u32>,
}

impl MockStats {
    pub fn total_requests(&self) -> u32 {
        self.attempts.values().sum()
    }
}

struct Shared {
    script: MockScript,
    admission: Semaphore,
    inflight: AtomicUsize,
    max_inflight: AtomicUsize,
    attempts: Mutex<HashMap<String, u32>>,
}

impl Shared {
    fn stats(&self) -> MockStats {
        let attempts = self.attempts.lock().expect("attempt counters poisoned");
        MockStats {
            max_inflight: self.max_inflight.load(Ordering::SeqCst),
            attempts: attempts.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        }
    }

    fn record_attempt(&self, id: &str) -> u32 {
        let mut attempts = self.attempts.lock().expect("attempt counters poisoned");
        let n = attempts.entry(id.to_string()).or_insert(0);
        *n += 1;
        *n
    }
}

/// A running mock. Dropping the handle stops the server.
pub struct MockHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        self.shared.stats()
    }

    /// Signals shutdown without waiting. Safe to call from any thread.
    pub fn shutdown_signal(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }

    pub async fn stop(mut self) {
        self.shutdown_signal();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Waits until the server exits.
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockHandle {
    fn drop(&mut self) {
        self.shutdown_signal();
    }
}

/// Binds `port` (0 picks a free one) and serves `script` in the background.
pub async fn serve(script: MockScript, port: u16) -> Result<MockHandle, MockError> {
    let listener = TcpListener::bind(("127.0.0.1", port))
        .await
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => MockError::PortInUse(port),
            _ => MockError::Io(e),
        })?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        admission: Semaphore::new(script.workers.max(1)),
        script,
        inflight: AtomicUsize::new(0),
        max_inflight: AtomicUsize::new(0),
        attempts: Mutex::new(HashMap::new()),
    });
    let app = Router::new()
        .route(GENERATE_ROUTE, post(handle_generate))
        .route(LOGLIKELIHOOD_ROUTE, post(handle_loglikelihood))
        .route(HEALTH_ROUTE, get(handle_health))
        .route("/stats", get(handle_stats))
        .with_state(Arc::clone(&shared));
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = server.await {
            tracing::error!(%e, "mock server exited");
        }
    });
    Ok(MockHandle {
        addr,
        shared,
        shutdown: Some(tx),
        task: Some(task),
    })
}

async fn handle_health(State(shared): State<Arc<Shared>>) -> Json<Health> {
    Json(Health {
        model_name: shared.script.model_name.clone(),
        ready: true,
    })
}

async fn handle_stats(State(shared): State<Arc<Shared>>) -> Json<MockStats> {
    Json(shared.stats())
}

async fn handle_generate(
    State(shared): State<Arc<Shared>>,
    Json(mut req): Json<GenerationRequest>,
) -> Response {
    req.mode = EvalMode::Generation;
    handle(shared, req).await
}

async fn handle_loglikelihood(
    State(shared): State<Arc<Shared>>,
    Json(mut req): Json<GenerationRequest>,
) -> Response {
    req.mode = EvalMode::Loglikelihood;
    handle(shared, req).await
}

async fn handle(shared: Arc<Shared>, req: GenerationRequest) -> Response {
    let attempt = shared.record_attempt(&req.instance_id);
    let _permit = shared
        .admission
        .acquire()
        .await
        .expect("admission semaphore is never closed");
    let now = shared.inflight.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_inflight.fetch_max(now, Ordering::SeqCst);

    if shared.script.service_time_ms > 0.0 {
        tokio::time::sleep(Duration::from_secs_f64(
            shared.script.service_time_ms / 1000.0,
        ))
        .await;
    }

    let response = if let Some(status) = shared.script.fault_for(&req.instance_id, attempt) {
        let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = serde_json::json!({"error": "injected fault", "attempt": attempt});
        (status, Json(body)).into_response()
    } else if let Err(msg) = req.validate() {
        (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(serde_json::json!({ "error": msg })),
        )
            .into_response()
    } else {
        let resp = match req.mode {
            EvalMode::Generation => generation_stub(&req, &shared.script),
            EvalMode::Loglikelihood => loglikelihood_stub(&req, &shared.script),
        };
        Json(resp).into_response()
    };

    shared.inflight.fetch_sub(1, Ordering::SeqCst);
    response
}

/// Answer text for a generation request, honoring stop sequences and the
/// whitespace-token budget.
pub fn generation_stub(req: &GenerationRequest, script: &MockScript) -> GenerationResponse {
    let mut text = script.answer_for(req);
    let mut finish = FinishReason::Stop;
    if let Some(cut) = req
        .params
        .stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
    {
        text.truncate(cut);
    }
    let budget = req.params.max_new_tokens as usize;
    if let Some((cut, _)) = text
        .char_indices()
        .filter(|(i, c)| {
            !c.is_whitespace() && (*i == 0 || text[..*i].ends_with(char::is_whitespace))
        })
        .nth(budget)
    {
        text.truncate(cut);
        text.truncate(text.trim_end().len());
        finish = FinishReason::Length;
    }
    GenerationResponse::text(&req.instance_id, text, finish)
}

/// Deterministic pseudo-scores: `-len(continuation)` chars, plus
/// [`SCRIPTED_BONUS`] when the continuation matches the scripted answer.
pub fn loglikelihood_stub(req: &GenerationRequest, script: &MockScript) -> GenerationResponse {
    let scripted = script.answers.get(&req.instance_id).map(|a| a.trim());
    let (sums, counts) = req
        .continuations
        .iter()
        .map(|c| {
            let mut score = -(c.chars().count() as f64);
            if scripted == Some(c.trim()) {
                score += SCRIPTED_BONUS;
            }
            (score, c.split_whitespace().count() as u32)
        })
        .unzip();
    GenerationResponse::scores(&req.instance_id, sums, counts)
}
