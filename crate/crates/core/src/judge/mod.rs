//! Strong-judge abstraction.
//!
//! A judge compares two responses to a context and returns one of three
//! verdicts. [`SimJudge`] is a noisy oracle over the synthetic ground truth;
//! [`RemoteJudge`] speaks the JSON wire protocol
//!
//! ```text
//! POST <endpoint>   {"id": .., "context": .., "response_a": .., "response_b": ..}
//! 200 OK            {"id": .., "label": 0 | 1 | 2}
//! ```
//!
//! where label 1 means A is better, 2 means B is better and 0 is a tie.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::data::PairLayout;
use crate::error::{Error, Result};

mod batch;
mod limiter;
pub mod mock;
mod remote;
mod sim;

pub use batch::{batch_judge, BatchJudgeResult};
pub use limiter::{max_in_any_window, RateLimiter};
pub use remote::{RemoteJudge, RemoteJudgeConfig};
pub use sim::{SimJudge, SimJudgeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    ABetter,
    BBetter,
    Tie,
}

impl Verdict {
    /// Wire label: 1 = A better, 2 = B better, 0 = tie.
    pub fn from_label(label: u8) -> Option<Verdict> {
        match label {
            1 => Some(Verdict::ABetter),
            2 => Some(Verdict::BBetter),
            0 => Some(Verdict::Tie),
            _ => None,
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Verdict::ABetter => 1,
            Verdict::BBetter => 2,
            Verdict::Tie => 0,
        }
    }

    /// Verdict for the same pair presented in the opposite order.
    pub fn flipped(self) -> Verdict {
        match self {
            Verdict::ABetter => Verdict::BBetter,
            Verdict::BBetter => Verdict::ABetter,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

/// Request body. Context and responses are opaque to the protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub id: String,
    pub context: String,
    pub response_a: String,
    pub response_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeReply {
    pub id: String,
    pub label: u8,
}

impl JudgeRequest {
    /// Request for a synthetic pair; latents travel as comma-separated decimals.
    pub fn from_pair(id: impl Into<String>, layout: &PairLayout, x_pair: &[f64]) -> Result<Self> {
        let (c, a, b) = layout.split(x_pair)?;
        Ok(Self {
            id: id.into(),
            context: encode_latent(c),
            response_a: encode_latent(a),
            response_b: encode_latent(b),
        })
    }

    /// Inverse of [`JudgeRequest::from_pair`].
    pub fn decode_pair(&self, layout: &PairLayout) -> Result<Vec<f64>> {
        let c = decode_latent(&self.context)?;
        let a = decode_latent(&self.response_a)?;
        let b = decode_latent(&self.response_b)?;
        if c.len() != layout.context_dim || a.len() != layout.item_dim || b.len() != layout.item_dim {
            return Err(Error::invalid(format!("request {} does not match the pair layout", self.id)));
        }
        Ok(layout.encode(&c, &a, &b))
    }
}

pub fn encode_latent(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn decode_latent(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad latent entry {t:?}: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JudgeOutcome {
    pub verdict: Verdict,
    pub attempts: u32,
    pub latency: Duration,
}

#[async_trait]
pub trait Judge: Send + Sync {
    async fn judge(&self, request: &JudgeRequest) -> Result<JudgeOutcome>;

    fn name(&self) -> &'static str;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_mapping() {
        assert_eq!(Verdict::from_label(1), Some(Verdict::ABetter));
        assert_eq!(Verdict::from_label(2), Some(Verdict::BBetter));
        assert_eq!(Verdict::from_label(0), Some(Verdict::Tie));
        assert_eq!(Verdict::from_label(3), None);
        for v in [Verdict::ABetter, Verdict::BBetter, Verdict::Tie] {
            assert_eq!(Verdict::from_label(v.label()), Some(v));
            assert_eq!(v.flipped().flipped(), v);
        }
    }

    #[test]
    fn verdict_serializes_in_screaming_case() {
        assert_eq!(serde_json::to_string(&Verdict::ABetter).unwrap(), "\"A_BETTER\"");
        assert_eq!(serde_json::to_string(&Verdict::Tie).unwrap(), "\"TIE\"");
    }

    #[test]
    fn pair_request_round_trips_bit_exactly() {
        let layout = PairLayout {
            context_dim: 2,
            item_dim: 2,
        };
        let x = vec![0.1, -1.0 / 3.0, 1e-300, 7.25, f64::MIN_POSITIVE, -2.5e17];
        let req = JudgeRequest::from_pair("x", &layout, &x).unwrap();
        assert_eq!(req.decode_pair(&layout).unwrap(), x);
    }

    #[test]
    fn malformed_latent_is_invalid_input() {
        assert!(matches!(decode_latent("1.0,abc"), Err(Error::InvalidInput(_))));
    }
}
