use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Judge, JudgeOutcome, JudgeRequest, Verdict};
use crate::data::GroundTruth;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimJudgeConfig {
    /// Probability of the correct sign on non-tie pairs.
    pub accuracy: f64,
    /// `|delta r*|` below which the judge reports a tie.
    pub tie_threshold: f64,
    pub latency_ms_mean: f64,
    pub seed: u64,
}

impl Default for SimJudgeConfig {
    fn default() -> Self {
        Self {
            accuracy: 0.95,
            tie_threshold: 0.25,
            latency_ms_mean: 0.0,
            seed: 0,
        }
    }
}

impl SimJudgeConfig {
    /// Accuracy of a strong reasoning judge on a hard benchmark subset.
    pub fn r1_hard(seed: u64) -> Self {
        Self {
            accuracy: 0.789,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.accuracy) {
            return Err(Error::invalid("judge accuracy must lie in [0.5, 1]"));
        }
        if !(self.tie_threshold >= 0.0) {
            return Err(Error::invalid("tie_threshold must be >= 0"));
        }
        if !(self.latency_ms_mean >= 0.0 && self.latency_ms_mean.is_finite()) {
            return Err(Error::invalid("latency_ms_mean must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Noisy oracle over the synthetic ground truth.
///
/// Verdicts depend only on `(seed, pair id, delta)`, so results do not change
/// when calls are reordered or batched.
#[derive(Debug, Clone)]
pub struct SimJudge {
    config: SimJudgeConfig,
    truth: GroundTruth,
}

impl SimJudge {
    pub fn new(config: SimJudgeConfig, truth: GroundTruth) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, truth })
    }

    pub fn config(&self) -> &SimJudgeConfig {
        &self.config
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    fn pair_rng(&self, pair_id: &str) -> ChaCha20Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(pair_id.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(seed)
    }

    /// Verdict and simulated latency for a pair with known reward difference.
    pub fn verdict_for_delta(&self, pair_id: &str, delta: f64) -> (Verdict, Duration) {
        let mut rng = self.pair_rng(pair_id);
        let correct_draw: f64 = rng.random();
        let verdict = if delta.abs() < self.config.tie_threshold {
            Verdict::Tie
        } else {
            let truth = if delta > 0.0 { Verdict::ABetter } else { Verdict::BBetter };
            if correct_draw < self.config.accuracy {
                truth
            } else {
                truth.flipped()
            }
        };
        let latency = if self.config.latency_ms_mean > 0.0 {
            let exp = Exp::new(1.0 / self.config.latency_ms_mean).expect("positive rate");
            Duration::from_secs_f64(rng.sample(exp) / 1000.0)
        } else {
            Duration::ZERO
        };
        (verdict, latency)
    }

    pub fn judge_pair(&self, pair_id: &str, x_pair: &[f64]) -> Result<Verdict> {
        let delta = self.truth.delta(x_pair)?;
        Ok(self.verdict_for_delta(pair_id, delta).0)
    }
}

#[async_trait]
impl Judge for SimJudge {
    async fn judge(&self, request: &JudgeRequest) -> Result<JudgeOutcome> {
        let x_pair = request.decode_pair(&self.truth.layout())?;
        let delta = self.truth.delta(&x_pair)?;
        let (verdict, latency) = self.verdict_for_delta(&request.id, delta);
        if !latency.is_zero() {
            tokio::time::sleep(latency).await;
        }
        Ok(JudgeOutcome {
            verdict,
            attempts: 1,
            latency,
        })
    }

    fn name(&self) -> &'static str {
        "sim"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judge(cfg: SimJudgeConfig) -> SimJudge {
        SimJudge::new(cfg, GroundTruth::new(2, 2, 0).unwrap()).unwrap()
    }

    #[test]
    fn perfect_judge_follows_sign() {
        let j = judge(SimJudgeConfig {
            accuracy: 1.0,
            tie_threshold: 0.0,
            ..SimJudgeConfig::default()
        });
        for i in 0..500 {
            let id = format!("p{i}");
            assert_eq!(j.verdict_for_delta(&id, 0.01 + i as f64 * 1e-3).0, Verdict::ABetter);
            assert_eq!(j.verdict_for_delta(&id, -0.5).0, Verdict::BBetter);
        }
    }

    #[test]
    fn infinite_tie_threshold_always_ties() {
        let j = judge(SimJudgeConfig {
            tie_threshold: f64::INFINITY,
            ..SimJudgeConfig::default()
        });
        for i in 0..200 {
            assert_eq!(j.verdict_for_delta(&i.to_string(), 1e6).0, Verdict::Tie);
        }
    }

    #[test]
    fn verdicts_are_reproducible_per_pair_id() {
        let j = judge(SimJudgeConfig::r1_hard(3));
        let a: Vec<_> = (0..100).map(|i| j.verdict_for_delta(&format!("x{i}"), 1.0).0).collect();
        let b: Vec<_> = (0..100).rev().map(|i| j.verdict_for_delta(&format!("x{i}"), 1.0).0).collect();
        let b: Vec<_> = b.into_iter().rev().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_accuracy_converges() {
        let q = 0.789;
        let j = judge(SimJudgeConfig::r1_hard(11));
        let n = 20_000;
        let hits = (0..n)
            .filter(|i| j.verdict_for_delta(&format!("pair-{i}"), 2.0).0 == Verdict::ABetter)
            .count();
        let rate = hits as f64 / n as f64;
        let se = (q * (1.0 - q) / n as f64).sqrt();
        assert!((rate - q).abs() < 3.0 * se, "rate {rate} vs {q}");
    }

    #[test]
    fn rejects_out_of_range_accuracy() {
        let cfg = SimJudgeConfig {
            accuracy: 0.3,
            ..SimJudgeConfig::default()
        };
        assert!(SimJudge::new(cfg, GroundTruth::new(2, 2, 0).unwrap()).is_err());
    }

    #[tokio::test]
    async fn malformed_request_is_invalid_input() {
        let j = judge(SimJudgeConfig::default());
        let req = JudgeRequest {
            id: "missing".into(),
            context: "1.0".into(),
            response_a: "0.0".into(),
            response_b: "0.0,0.0".into(),
        };
        assert!(matches!(j.judge(&req).await, Err(Error::InvalidInput(_))));
    }
}
