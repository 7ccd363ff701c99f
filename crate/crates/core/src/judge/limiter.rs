use std::collections::VecDeque;
use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::Instant;

/// Token bucket with `capacity` tokens where every spent token returns to the
/// bucket exactly one `window` after it was taken.
///
/// No window of length `window` ever contains more than `capacity` grants,
/// which is the guarantee a provider's "N requests per minute" quota needs.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    grants: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(capacity: usize, window: Duration) -> Self {
        assert!(capacity >= 1, "rate limiter capacity must be >= 1");
        Self {
            capacity,
            window,
            grants: Mutex::new(VecDeque::with_capacity(capacity)),
        }
    }

    pub fn per_minute(requests_per_minute: usize) -> Self {
        Self::new(requests_per_minute, Duration::from_secs(60))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn window(&self) -> Duration {
        self.window
    }

    /// Waits for a token and returns the instant it was granted.
    pub async fn acquire(&self) -> Instant {
        loop {
            let wait_until = {
                let mut grants = self.grants.lock().await;
                let now = Instant::now();
                while let Some(&front) = grants.front() {
                    if now.duration_since(front) >= self.window {
                        grants.pop_front();
                    } else {
                        break;
                    }
                }
                if grants.len() < self.capacity {
                    grants.push_back(now);
                    return now;
                }
                grants[0] + self.window
            };
            tokio::time::sleep_until(wait_until).await;
        }
    }
}

/// Largest number of timestamps falling in any half-open window of length `window`.
pub fn max_in_any_window(stamps: &[Instant], window: Duration) -> usize {
    let mut sorted = stamps.to_vec();
    sorted.sort();
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..sorted.len() {
        while sorted[hi].duration_since(sorted[lo]) >= window {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best
}
