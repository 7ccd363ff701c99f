use std::time::{Duration, Instant};

use futures::future::join_all;

use super::{Judge, JudgeOutcome, JudgeRequest};
use crate::error::Result;

#[derive(Debug)]
pub struct BatchJudgeResult {
    /// One entry per request, in request order.
    pub results: Vec<Result<JudgeOutcome>>,
    pub wall_time: Duration,
}

impl BatchJudgeResult {
    pub fn successes(&self) -> usize {
        self.results.iter().filter(|r| r.is_ok()).count()
    }

    pub fn failures(&self) -> usize {
        self.results.len() - self.successes()
    }

    /// Sum of per-call latencies over successful calls.
    pub fn total_latency(&self) -> Duration {
        self.results.iter().flatten().map(|o| o.latency).sum()
    }
}

/// Issues every request concurrently; concurrency and quota are the judge's concern.
pub async fn batch_judge(judge: &dyn Judge, requests: &[JudgeRequest]) -> BatchJudgeResult {
    let started = Instant::now();
    let results = join_all(requests.iter().map(|r| judge.judge(r))).await;
    BatchJudgeResult {
        results,
        wall_time: started.elapsed(),
    }
}
