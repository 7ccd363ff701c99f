//! In-process judge server implementing the wire protocol, for tests and demos.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Mutex};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::{Judge, JudgeReply, JudgeRequest, SimJudge};
use crate::error::Result;

pub const JUDGE_PATH: &str = "/judge";

#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// Answer with the simulated judge over the synthetic ground truth.
    Sim(SimJudge),
    /// Always answer with this label.
    Fixed(u8),
    /// Reply 200 with a body that is not a valid reply.
    Malformed,
}

#[derive(Debug)]
struct MockState {
    behavior: MockBehavior,
    fail_first: AtomicUsize,
    delay: Duration,
    received: Mutex<Vec<(Instant, String)>>,
}

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub behavior: MockBehavior,
    /// Number of initial requests answered with HTTP 500.
    pub fail_first: usize,
    pub delay: Duration,
}

impl MockConfig {
    pub fn new(behavior: MockBehavior) -> Self {
        Self {
            behavior,
            fail_first: 0,
            delay: Duration::ZERO,
        }
    }
}

pub fn router(config: MockConfig) -> (Router, MockHandle) {
    let state = Arc::new(MockState {
        behavior: config.behavior,
        fail_first: AtomicUsize::new(config.fail_first),
        delay: config.delay,
        received: Mutex::new(Vec::new()),
    });
    let app = Router::new()
        .route(JUDGE_PATH, post(handle))
        .with_state(state.clone());
    (app, MockHandle { state })
}

async fn handle(State(state): State<Arc<MockState>>, Json(req): Json<JudgeRequest>) -> Response {
    state.received.lock().await.push((Instant::now(), req.id.clone()));
    let should_fail = state
        .fail_first
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if should_fail {
        return (StatusCode::INTERNAL_SERVER_ERROR, "injected failure").into_response();
    }
    if !state.delay.is_zero() {
        tokio::time::sleep(state.delay).await;
    }
    let label = match &state.behavior {
        MockBehavior::Fixed(l) => *l,
        MockBehavior::Malformed => return (StatusCode::OK, "{\"verdict\": \"yes\"}").into_response(),
        MockBehavior::Sim(judge) => match judge.judge(&req).await {
            Ok(outcome) => outcome.verdict.label(),
            Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
        },
    };
    Json(JudgeReply { id: req.id, label }).into_response()
}

/// Read access to what the server has seen.
#[derive(Debug, Clone)]
pub struct MockHandle {
    state: Arc<MockState>,
}

impl MockHandle {
    pub async fn received(&self) -> Vec<(Instant, String)> {
        self.state.received.lock().await.clone()
    }

    pub async fn request_count(&self) -> usize {
        self.state.received.lock().await.len()
    }
}

/// A running mock server bound to an ephemeral local port.
pub struct MockJudgeServer {
    addr: SocketAddr,
    handle: MockHandle,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl MockJudgeServer {
    pub async fn spawn(config: MockConfig) -> Result<Self> {
        Self::bind("127.0.0.1:0".parse().expect("valid addr"), config).await
    }

    pub async fn bind(addr: SocketAddr, config: MockConfig) -> Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (app, handle) = router(config);
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(Self {
            addr,
            handle,
            shutdown: Some(tx),
            task,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}{}", self.addr, JUDGE_PATH)
    }

    pub fn handle(&self) -> &MockHandle {
        &self.handle
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

impl Drop for MockJudgeServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
