use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

use super::{Judge, JudgeOutcome, JudgeReply, JudgeRequest, RateLimiter, Verdict};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteJudgeConfig {
    pub endpoint: String,
    pub requests_per_minute: usize,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
    /// Length of the quota window; 60 s for a per-minute quota.
    pub window_ms: u64,
}

impl Default for RemoteJudgeConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8787/judge".into(),
            requests_per_minute: 200,
            max_in_flight: 256,
            max_attempts: 4,
            backoff_base_ms: 200,
            timeout_ms: 120_000,
            window_ms: 60_000,
        }
    }
}

impl RemoteJudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.requests_per_minute == 0 {
            return Err(Error::invalid("requests_per_minute must be >= 1"));
        }
        if self.max_in_flight == 0 || self.max_attempts == 0 {
            return Err(Error::invalid("max_in_flight and max_attempts must be >= 1"));
        }
        if self.window_ms == 0 {
            return Err(Error::invalid("window_ms must be >= 1"));
        }
        reqwest::Url::parse(&self.endpoint).map_err(|e| Error::invalid(format!("endpoint: {e}")))?;
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16)))
    }
}

enum AttemptError {
    Transient(String),
    Fatal(Error),
}

/// HTTP client for the judge wire protocol with a shared quota and bounded concurrency.
pub struct RemoteJudge {
    config: RemoteJudgeConfig,
    client: reqwest::Client,
    limiter: Arc<RateLimiter>,
    in_flight: Semaphore,
    sends: Mutex<Vec<Instant>>,
}

impl RemoteJudge {
    pub fn new(config: RemoteJudgeConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::invalid(format!("http client: {e}")))?;
        let limiter = Arc::new(RateLimiter::new(
            config.requests_per_minute,
            Duration::from_millis(config.window_ms),
        ));
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            client,
            limiter,
            sends: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &RemoteJudgeConfig {
        &self.config
    }

    /// Grant instants of every request sent so far, retries included.
    pub async fn send_times(&self) -> Vec<Instant> {
        self.sends.lock().await.clone()
    }

    async fn attempt(&self, request: &JudgeRequest) -> std::result::Result<Verdict, AttemptError> {
        let granted = self.limiter.acquire().await;
        self.sends.lock().await.push(granted);
        let resp = self
            .client
            .post(&self.config.endpoint)
            .json(request)
            .send()
            .await
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(AttemptError::Transient(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(Error::Protocol(format!("unexpected status {status}"))));
        }
        let body = resp
            .bytes()
            .await
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let reply: JudgeReply = serde_json::from_slice(&body)
            .map_err(|e| AttemptError::Fatal(Error::Protocol(format!("malformed reply: {e}"))))?;
        if reply.id != request.id {
            return Err(AttemptError::Fatal(Error::Protocol(format!(
                "reply id {:?} does not match request id {:?}",
                reply.id, request.id
            ))));
        }
        Verdict::from_label(reply.label)
            .ok_or_else(|| AttemptError::Fatal(Error::Protocol(format!("label {} not in {{0, 1, 2}}", reply.label))))
    }
}

#[async_trait]
impl Judge for RemoteJudge {
    async fn judge(&self, request: &JudgeRequest) -> Result<JudgeOutcome> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|_| Error::State("judge client closed".into()))?;
        let started = std::time::Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(request).await {
                Ok(verdict) => {
                    return Ok(JudgeOutcome {
                        verdict,
                        attempts: attempt,
                        latency: started.elapsed(),
                    })
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(msg)) => {
                    tracing::debug!(id = %request.id, attempt, %msg, "transient judge failure");
                    last = msg;
                    if attempt < self.config.max_attempts {
                        tokio::time::sleep(self.config.backoff(attempt)).await;
                    }
                }
            }
        }
        Err(Error::JudgeUnavailable {
            attempts: self.config.max_attempts,
            detail: last,
        })
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}
