//! Uncertainty-based routing between the preference model and the judge.
//!
//! A pair keeps the model's swap-averaged reward difference when its
//! uncertainty is at most the threshold; above it the judge is asked and its
//! verdict mapped through the inverse sigmoid to `+-ln((1-eps)/eps)` or 0.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PairLayout, PreferenceRecord, Split};
use crate::error::{Error, Result};
use crate::judge::{batch_judge, Judge, JudgeRequest, Verdict};
use crate::sngp::{GpHead, PairScore};

/// Thresholds used for routing-evaluation sweeps; the first disables routing in practice.
pub const SWEEP_THRESHOLDS: [f64; 5] = [10.0, 1.45, 1.40, 1.35, 1.30];
/// All threshold presets, including the one only used during alignment.
pub const THRESHOLD_PRESETS: [f64; 6] = [10.0, 1.45, 1.40, 1.35, 1.30, 1.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    #[default]
    Uncertainty,
    /// Same number of calls as `Uncertainty` at the threshold, chosen uniformly.
    Random,
    /// Threshold picked per batch so that roughly `target_ratio` of pairs are routed.
    Adaptive,
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertainty" => Ok(RoutingMode::Uncertainty),
            "random" => Ok(RoutingMode::Random),
            "adaptive" => Ok(RoutingMode::Adaptive),
            other => Err(Error::invalid(format!("unknown routing mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RoutingMode::Uncertainty => "uncertainty",
            RoutingMode::Random => "random",
            RoutingMode::Adaptive => "adaptive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub threshold: f64,
    pub epsilon: f64,
    pub mode: RoutingMode,
    pub target_ratio: f64,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            threshold: 10.0,
            epsilon: 0.01,
            mode: RoutingMode::Uncertainty,
            target_ratio: 0.1,
            seed: 0,
        }
    }
}

impl RouterConfig {
    /// Never routes.
    pub fn no_routing() -> Self {
        Self {
            threshold: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::invalid("epsilon must lie in (0, 0.5)"));
        }
        if self.threshold.is_nan() {
            return Err(Error::invalid("threshold must not be NaN"));
        }
        if !(0.0..=1.0).contains(&self.target_ratio) {
            return Err(Error::invalid("target_ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreSource {
    Pm,
    Judge,
    PmFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutedScore {
    pub p_tilde: f64,
    pub source: ScoreSource,
    pub u: f64,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostLedger {
    pub comparisons: usize,
    pub pm_evals: usize,
    pub judge_calls: usize,
    pub fallbacks: usize,
    pub judge_attempts: usize,
    pub scoring_time: Duration,
    pub judging_time: Duration,
    /// Sum of per-call judge latencies, simulated or measured.
    pub judge_latency: Duration,
}

impl CostLedger {
    pub fn calls_ratio(&self) -> f64 {
        if self.comparisons == 0 {
            0.0
        } else {
            self.judge_calls as f64 / self.comparisons as f64
        }
    }

    pub fn routed(&self) -> usize {
        self.judge_calls + self.fallbacks
    }

    pub fn wall_time(&self) -> Duration {
        self.scoring_time + self.judging_time
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.comparisons += other.comparisons;
        self.pm_evals += other.pm_evals;
        self.judge_calls += other.judge_calls;
        self.fallbacks += other.fallbacks;
        self.judge_attempts += other.judge_attempts;
        self.scoring_time += other.scoring_time;
        self.judging_time += other.judging_time;
        self.judge_latency += other.judge_latency;
    }
}

/// Swap-averaged score from the two presentation orders of one pair.
pub fn symmetric_score(ab: PairScore, ba: PairScore) -> PairScore {
    PairScore {
        p: (ab.p - ba.p) / 2.0,
        u: (ab.u + ba.u) / 2.0,
        g: (ab.g - ba.g) / 2.0,
    }
}

pub fn score_pair_symmetric(head: &GpHead, pair_ab: &[f64], pair_ba: &[f64]) -> Result<PairScore> {
    Ok(symmetric_score(head.predict_pair(pair_ab)?, head.predict_pair(pair_ba)?))
}

/// Symmetric scores for every record, in record order.
pub fn score_records(head: &GpHead, layout: &PairLayout, records: &[PreferenceRecord]) -> Result<Vec<PairScore>> {
    records
        .par_iter()
        .map(|r| {
            let swapped = layout.swap(&r.x_pair)?;
            score_pair_symmetric(head, &r.x_pair, &swapped)
        })
        .collect()
}

/// Inverse-sigmoid reward difference for a judge verdict.
pub fn map_verdict(verdict: Verdict, epsilon: f64) -> f64 {
    let margin = ((1.0 - epsilon) / epsilon).ln();
    match verdict {
        Verdict::ABetter => margin,
        Verdict::BBetter => -margin,
        Verdict::Tie => 0.0,
    }
}

/// Which pairs of a batch go to the judge.
pub fn select_routes(config: &RouterConfig, uncertainties: &[f64]) -> Vec<bool> {
    let n = uncertainties.len();
    match config.mode {
        RoutingMode::Uncertainty => uncertainties.iter().map(|&u| u > config.threshold).collect(),
        RoutingMode::Random => {
            let count = uncertainties.iter().filter(|&&u| u > config.threshold).count();
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            let mut mask = vec![false; n];
            for idx in rand::seq::index::sample(&mut rng, n, count) {
                mask[idx] = true;
            }
            mask
        }
        RoutingMode::Adaptive => {
            let threshold = adaptive_threshold(uncertainties, config.target_ratio);
            uncertainties.iter().map(|&u| u > threshold).collect()
        }
    }
}

/// Threshold routing at most `round(ratio * n)` pairs: the next-largest uncertainty.
pub fn adaptive_threshold(uncertainties: &[f64], ratio: f64) -> f64 {
    let n = uncertainties.len();
    let budget = (ratio * n as f64).round() as usize;
    if budget >= n {
        return f64::NEG_INFINITY;
    }
    let mut sorted = uncertainties.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[budget]
}

/// Routes one batch. `requests[i]` describes pair `i` for the judge.
///
/// Judge failures never surface as errors: the pair keeps the model's score
/// with source `PmFallback` and the ledger counts it.
pub async fn route_batch(
    config: &RouterConfig,
    scores: &[PairScore],
    judge: Option<&dyn Judge>,
    requests: &[JudgeRequest],
) -> Result<(Vec<RoutedScore>, CostLedger)> {
    config.validate()?;
    if scores.len() != requests.len() {
        return Err(Error::invalid("scores and judge requests differ in length"));
    }
    let uncertainties: Vec<f64> = scores.iter().map(|s| s.u).collect();
    let mask = select_routes(config, &uncertainties);
    let mut out: Vec<RoutedScore> = scores
        .iter()
        .map(|s| RoutedScore {
            p_tilde: s.p,
            source: ScoreSource::Pm,
            u: s.u,
            verdict: None,
        })
        .collect();
    let mut ledger = CostLedger {
        comparisons: scores.len(),
        pm_evals: scores.len(),
        ..CostLedger::default()
    };
    let routed: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    if routed.is_empty() {
        return Ok((out, ledger));
    }
    match judge {
        None => {
            for &i in &routed {
                out[i].source = ScoreSource::PmFallback;
            }
            ledger.fallbacks = routed.len();
        }
        Some(judge) => {
            let batch: Vec<JudgeRequest> = routed.iter().map(|&i| requests[i].clone()).collect();
            let result = batch_judge(judge, &batch).await;
            ledger.judging_time = result.wall_time;
            for (&i, res) in routed.iter().zip(result.results) {
                match res {
                    Ok(outcome) => {
                        out[i].p_tilde = map_verdict(outcome.verdict, config.epsilon);
                        out[i].source = ScoreSource::Judge;
                        out[i].verdict = Some(outcome.verdict);
                        ledger.judge_calls += 1;
                        ledger.judge_attempts += outcome.attempts as usize;
                        ledger.judge_latency += outcome.latency;
                    }
                    Err(e) => {
                        tracing::warn!(id = %requests[i].id, error = %e, "judge failed, falling back to model score");
                        out[i].source = ScoreSource::PmFallback;
                        ledger.fallbacks += 1;
                    }
                }
            }
        }
    }
    Ok((out, ledger))
}

/// Routes a single pair in uncertainty mode.
pub async fn route(
    config: &RouterConfig,
    score: PairScore,
    judge: Option<&dyn Judge>,
    request: &JudgeRequest,
) -> Result<(RoutedScore, CostLedger)> {
    let single = RouterConfig {
        mode: RoutingMode::Uncertainty,
        ..config.clone()
    };
    let (mut routed, ledger) = route_batch(&single, &[score], judge, std::slice::from_ref(request)).await?;
    Ok((routed.remove(0), ledger))
}

/// 1 for a correct sign, 0.5 for an exact zero, 0 otherwise.
pub fn correctness(p_tilde: f64, true_delta: f64) -> f64 {
    if p_tilde == 0.0 {
        0.5
    } else if (p_tilde > 0.0) == (true_delta > 0.0) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: BTreeMap<Split, f64>,
    pub counts: BTreeMap<Split, usize>,
    pub overall: f64,
    pub ledger: CostLedger,
    #[serde(skip)]
    pub scores: Vec<PairScore>,
    #[serde(skip)]
    pub routed: Vec<RoutedScore>,
    #[serde(skip)]
    pub correct: Vec<f64>,
}

/// Accuracy of routed predictions against the sign of the true reward difference.
pub async fn evaluate_accuracy(
    head: &GpHead,
    config: &RouterConfig,
    layout: &PairLayout,
    records: &[PreferenceRecord],
    judge: Option<&dyn Judge>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let scores = score_records(head, layout, records)?;
    let scoring_time = started.elapsed();
    evaluate_scored(config, layout, records, scores, judge, scoring_time).await
}

/// Like [`evaluate_accuracy`] with scores computed beforehand.
pub async fn evaluate_scored(
    config: &RouterConfig,
    layout: &PairLayout,
    records: &[PreferenceRecord],
    scores: Vec<PairScore>,
    judge: Option<&dyn Judge>,
    scoring_time: Duration,
) -> Result<EvalReport> {
    let truth: Vec<f64> = records
        .iter()
        .map(|r| {
            r.true_delta
                .ok_or_else(|| Error::invalid(format!("record {} has no true_delta; evaluation needs unredacted data", r.id)))
        })
        .collect::<Result<_>>()?;
    let requests = records
        .iter()
        .map(|r| JudgeRequest::from_pair(r.id.clone(), layout, &r.x_pair))
        .collect::<Result<Vec<_>>>()?;
    let (routed, mut ledger) = route_batch(config, &scores, judge, &requests).await?;
    ledger.scoring_time = scoring_time;

    let correct: Vec<f64> = routed
        .iter()
        .zip(&truth)
        .map(|(r, &d)| correctness(r.p_tilde, d))
        .collect();
    let mut sums: BTreeMap<Split, (f64, usize)> = BTreeMap::new();
    for (rec, c) in records.iter().zip(&correct) {
        let e = sums.entry(rec.split).or_insert((0.0, 0));
        e.0 += c;
        e.1 += 1;
    }
    let overall = if correct.is_empty() {
        f64::NAN
    } else {
        correct.iter().sum::<f64>() / correct.len() as f64
    };
    Ok(EvalReport {
        accuracy: sums.iter().map(|(k, (s, n))| (*k, s / *n as f64)).collect(),
        counts: sums.iter().map(|(k, (_, n))| (*k, *n)).collect(),
        overall,
        ledger,
        scores,
        routed,
        correct,
    })
}
