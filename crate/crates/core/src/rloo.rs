//! Leave-one-out advantages from routed pairwise reward differences, and a
//! contextual-bandit alignment loop that consumes them.
//!
//! For each prompt the policy samples `K` of its candidates. All `K(K-1)`
//! ordered pairs are scored by the preference model, the resulting matrices
//! are symmetrized (`P <- (P - P^T)/2`, `U <- (U + U^T)/2`) and then routed
//! entry by entry on the symmetrized uncertainty. The advantage of sample `i`
//! is the mean of row `i` of the routed matrix over the other samples.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AlignPrompt, GroundTruth, PairLayout};
use crate::error::{Error, Result};
use crate::judge::{Judge, JudgeRequest};
use crate::router::{route_batch, CostLedger, RouterConfig, ScoreSource};
use crate::sngp::{GpHead, PairScore};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceMatrix {
    /// Routed reward differences; `p[(i, j)]` favours sample `i` when positive.
    pub p: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub routed: DMatrix<bool>,
    pub group_id: String,
}

impl PreferenceMatrix {
    pub fn k(&self) -> usize {
        self.p.nrows()
    }

    /// Builds from raw ordered-pair scores; the diagonal of the inputs is ignored.
    pub fn from_raw(group_id: impl Into<String>, raw_p: &DMatrix<f64>, raw_u: &DMatrix<f64>) -> Result<Self> {
        let k = raw_p.nrows();
        if raw_p.ncols() != k || raw_u.shape() != (k, k) {
            return Err(Error::invalid("preference matrices must be square and of equal size"));
        }
        let (p, u) = symmetrize(raw_p, raw_u);
        Ok(Self {
            p,
            u,
            routed: DMatrix::from_element(k, k, false),
            group_id: group_id.into(),
        })
    }
}

/// `P <- (P - P^T)/2` and `U <- (U + U^T)/2`, with zero diagonals.
pub fn symmetrize(raw_p: &DMatrix<f64>, raw_u: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = raw_p.nrows();
    let mut p = DMatrix::zeros(k, k);
    let mut u = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let pij = (raw_p[(i, j)] - raw_p[(j, i)]) / 2.0;
            p[(i, j)] = pij;
            p[(j, i)] = -pij;
            let uij = (raw_u[(i, j)] + raw_u[(j, i)]) / 2.0;
            u[(i, j)] = uij;
            u[(j, i)] = uij;
        }
    }
    (p, u)
}

/// Row means of the off-diagonal entries.
pub fn advantages(m: &PreferenceMatrix) -> Result<DVector<f64>> {
    advantages_from(&m.p)
}

pub fn advantages_from(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let k = p.nrows();
    if k < 2 || p.ncols() != k {
        return Err(Error::invalid(format!("advantages need a square matrix with K >= 2, got {}x{}", k, p.ncols())));
    }
    Ok(DVector::from_fn(k, |i, _| {
        (0..k).filter(|&j| j != i).map(|j| p[(i, j)]).sum::<f64>() / (k - 1) as f64
    }))
}

/// One prompt with `K` sampled candidates, ready for matrix construction.
#[derive(Debug, Clone)]
pub struct Group<'a> {
    pub group_id: String,
    pub context: &'a [f64],
    pub responses: Vec<&'a [f64]>,
}

/// Builds and routes the matrices of a batch of groups.
///
/// Routing decisions are taken over the upper-triangular entries of the whole
/// batch, so random mode matches the uncertainty-mode call count per batch.
pub async fn build_matrices(
    head: &GpHead,
    router: &RouterConfig,
    layout: &PairLayout,
    groups: &[Group<'_>],
    judge: Option<&dyn Judge>,
) -> Result<(Vec<PreferenceMatrix>, CostLedger)> {
    let started = Instant::now();
    let mut matrices = groups
        .par_iter()
        .map(|g| score_group(head, layout, g))
        .collect::<Result<Vec<_>>>()?;
    let scoring_time = started.elapsed();

    let mut entries = Vec::new();
    let mut scores = Vec::new();
    let mut requests = Vec::new();
    for (gi, (group, m)) in groups.iter().zip(&matrices).enumerate() {
        let k = m.k();
        for i in 0..k {
            for j in (i + 1)..k {
                entries.push((gi, i, j));
                scores.push(PairScore {
                    p: m.p[(i, j)],
                    u: m.u[(i, j)],
                    g: f64::NAN,
                });
                let x = layout.encode(group.context, group.responses[i], group.responses[j]);
                requests.push(JudgeRequest::from_pair(format!("{}:{}-{}", group.group_id, i, j), layout, &x)?);
            }
        }
    }
    let (routed, mut ledger) = route_batch(router, &scores, judge, &requests).await?;
    ledger.scoring_time = scoring_time;
    // Each symmetric entry stands for two ordered comparisons of the model.
    ledger.pm_evals *= 2;
    for (&(gi, i, j), r) in entries.iter().zip(&routed) {
        let m = &mut matrices[gi];
        m.p[(i, j)] = r.p_tilde;
        m.p[(j, i)] = -r.p_tilde;
        let flag = r.source != ScoreSource::Pm;
        m.routed[(i, j)] = flag;
        m.routed[(j, i)] = flag;
    }
    Ok((matrices, ledger))
}

fn score_group(head: &GpHead, layout: &PairLayout, group: &Group<'_>) -> Result<PreferenceMatrix> {
    let k = group.responses.len();
    if k < 2 {
        return Err(Error::invalid(format!("group {} has fewer than two responses", group.group_id)));
    }
    let mut raw_p = DMatrix::zeros(k, k);
    let mut raw_u = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let s = head.predict_pair(&layout.encode(group.context, group.responses[i], group.responses[j]))?;
                raw_p[(i, j)] = s.p;
                raw_u[(i, j)] = s.u;
            }
        }
    }
    PreferenceMatrix::from_raw(group.group_id.clone(), &raw_p, &raw_u)
}

/// Softmax policy over a fixed candidate pool with bilinear scores
/// `s(c, y) = [c; 1]^T theta y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub theta: DMatrix<f64>,
    pub reference: DMatrix<f64>,
}

impl ToyPolicy {
    pub fn new(context_dim: usize, item_dim: usize, init_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let theta = DMatrix::from_fn(context_dim + 1, item_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            init_scale * z
        });
        Self {
            reference: theta.clone(),
            theta,
        }
    }

    fn check(&self, prompt: &AlignPrompt) -> Result<()> {
        if prompt.context.len() + 1 != self.theta.nrows() {
            return Err(Error::invalid(format!("prompt {} context has the wrong dimension", prompt.id)));
        }
        if prompt.candidates.is_empty() || prompt.candidates.iter().any(|y| y.len() != self.theta.ncols()) {
            return Err(Error::invalid(format!("prompt {} has missing or mis-sized candidates", prompt.id)));
        }
        Ok(())
    }

    fn scores_with(theta: &DMatrix<f64>, prompt: &AlignPrompt) -> DVector<f64> {
        let ctx = augmented_context(&prompt.context);
        let w = theta.tr_mul(&ctx);
        DVector::from_iterator(
            prompt.candidates.len(),
            prompt.candidates.iter().map(|y| y.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>()),
        )
    }

    pub fn log_probs(&self, prompt: &AlignPrompt) -> Result<DVector<f64>> {
        self.check(prompt)?;
        Ok(log_softmax(&Self::scores_with(&self.theta, prompt)))
    }

    pub fn probs(&self, prompt: &AlignPrompt) -> Result<DVector<f64>> {
        Ok(self.log_probs(prompt)?.map(f64::exp))
    }

    /// `KL(pi_theta(.|x) || pi_ref(.|x))`, exact over the pool.
    pub fn kl(&self, prompt: &AlignPrompt) -> Result<f64> {
        let lp = self.log_probs(prompt)?;
        let lr = log_softmax(&Self::scores_with(&self.reference, prompt));
        Ok(kl_from_logs(&lp, &lr))
    }

    /// Draws `k` distinct candidates with the Gumbel top-k trick.
    pub fn sample(&self, prompt: &AlignPrompt, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let lp = self.log_probs(prompt)?;
        if k > lp.len() {
            return Err(Error::invalid(format!("cannot draw {k} distinct candidates from a pool of {}", lp.len())));
        }
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
        let mut keys: Vec<(f64, usize)> = lp.iter().enumerate().map(|(m, &l)| (l + gumbel.sample(rng), m)).collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(keys.into_iter().take(k).map(|(_, m)| m).collect())
    }
}

fn augmented_context(context: &[f64]) -> DVector<f64> {
    DVector::from_iterator(context.len() + 1, context.iter().copied().chain(std::iter::once(1.0)))
}

fn log_softmax(s: &DVector<f64>) -> DVector<f64> {
    let max = s.max();
    let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    s.map(|v| v - lse)
}

fn kl_from_logs(lp: &DVector<f64>, lr: &DVector<f64>) -> f64 {
    lp.iter().zip(lr.iter()).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}

/// A prompt's sampled candidates with their routed matrix.
#[derive(Debug, Clone)]
pub struct GroupSample {
    pub prompt: usize,
    pub indices: Vec<usize>,
    pub p_tilde: DMatrix<f64>,
    /// Log-probabilities of the sampled candidates under the sampling policy.
    pub old_log_probs: Vec<f64>,
}

/// Mean RLOO loss over groups and its gradient with respect to `theta`.
///
/// Without clipping the per-prompt loss is
/// `-(1/(K(K-1))) sum_i sum_{j != i} P~_ij log pi(y_i|x) + beta KL(pi || pi_ref)`.
/// With a clip ratio the advantage term becomes the PPO surrogate on the
/// importance weight against `old_log_probs`.
pub fn rloo_loss_and_grad(
    policy: &ToyPolicy,
    prompts: &[AlignPrompt],
    samples: &[GroupSample],
    kl_beta: f64,
    clip_ratio: Option<f64>,
) -> Result<(f64, DMatrix<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty RLOO batch"));
    }
    let mut total = 0.0;
    let mut grad = DMatrix::zeros(policy.theta.nrows(), policy.theta.ncols());
    for s in samples {
        let prompt = prompts
            .get(s.prompt)
            .ok_or_else(|| Error::invalid(format!("sample refers to missing prompt {}", s.prompt)))?;
        let k = s.indices.len();
        if s.p_tilde.shape() != (k, k) || s.old_log_probs.len() != k {
            return Err(Error::invalid("sample matrix does not match its candidate count"));
        }
        let adv = advantages_from(&s.p_tilde)?;
        let lp = policy.log_probs(prompt)?;
        let lr = log_softmax(&ToyPolicy::scores_with(&policy.reference, prompt));
        let pi = lp.map(f64::exp);

        // d loss / d score, accumulated per candidate.
        let mut d_scores = DVector::zeros(lp.len());
        let mut loss = 0.0;
        for (slot, &m) in s.indices.iter().enumerate() {
            if m >= lp.len() {
                return Err(Error::invalid(format!("candidate index {m} out of range")));
            }
            let a = adv[slot];
            // coefficient c such that the term's gradient is -c (e_m - pi) / K
            let coeff = match clip_ratio {
                None => {
                    loss -= a * lp[m];
                    a
                }
                Some(eps) => {
                    let r = (lp[m] - s.old_log_probs[slot]).exp();
                    let unclipped = r * a;
                    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
                    if unclipped <= clipped {
                        loss -= unclipped;
                        a * r
                    } else {
                        loss -= clipped;
                        0.0
                    }
                }
            };
            d_scores[m] -= coeff / k as f64;
            d_scores.axpy(coeff / k as f64, &pi, 1.0);
        }
        loss /= k as f64;

        let kl = kl_from_logs(&lp, &lr);
        loss += kl_beta * kl;
        if kl_beta != 0.0 {
            for m in 0..lp.len() {
                d_scores[m] += kl_beta * pi[m] * (lp[m] - lr[m] - kl);
            }
        }
        total += loss;

        // score_m = ctx^T theta y_m  =>  d theta = ctx (sum_m d_m y_m)^T
        let ctx = augmented_context(&prompt.context);
        let mut y_sum = DVector::zeros(policy.theta.ncols());
        for (m, y) in prompt.candidates.iter().enumerate() {
            if d_scores[m] != 0.0 {
                y_sum.axpy(d_scores[m], &DVector::from_column_slice(y), 1.0);
            }
        }
        grad.ger(1.0, &ctx, &y_sum, 1.0);
    }
    let n = samples.len() as f64;
    grad /= n;
    Ok((total / n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub k: usize,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub router: RouterConfig,
    pub clip_ratio: Option<f64>,
    /// Gradient steps per sampled batch; only meaningful with clipping.
    pub update_epochs: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            k: 4,
            kl_beta: 0.01,
            learning_rate: 0.5,
            batch_size: 16,
            epochs: 1,
            // Judge verdicts map to +-2, as in the labels used for alignment.
            router: RouterConfig {
                epsilon: crate::sigmoid(-2.0),
                ..RouterConfig::default()
            },
            clip_ratio: None,
            update_epochs: 1,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("K must be at least 2"));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::invalid("kl_beta must be finite and non-negative"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.update_epochs == 0 {
            return Err(Error::invalid("batch_size and update_epochs must be positive"));
        }
        if let Some(c) = self.clip_ratio {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::invalid("clip_ratio must lie in (0, 1)"));
            }
        }
        self.router.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub loss: f64,
    pub ledger: CostLedger,
}

/// Samples, routes and applies `update_epochs` gradient steps for one batch.
#[allow(clippy::too_many_arguments)]
pub async fn rloo_step(
    policy: &mut ToyPolicy,
    prompts: &[AlignPrompt],
    batch: &[usize],
    head: &GpHead,
    layout: &PairLayout,
    judge: Option<&dyn Judge>,
    config: &AlignConfig,
    step: usize,
    rng: &mut ChaCha20Rng,
) -> Result<StepReport> {
    let mut picks = Vec::with_capacity(batch.len());
    for &pi in batch {
        let prompt = prompts
            .get(pi)
            .ok_or_else(|| Error::invalid(format!("batch refers to missing prompt {pi}")))?;
        let indices = policy.sample(prompt, config.k, rng)?;
        let lp = policy.log_probs(prompt)?;
        let old: Vec<f64> = indices.iter().map(|&m| lp[m]).collect();
        picks.push((pi, indices, old));
    }
    let groups: Vec<Group<'_>> = picks
        .iter()
        .map(|(pi, idx, _)| {
            let p = &prompts[*pi];
            Group {
                group_id: format!("{}@{}", p.id, step),
                context: &p.context,
                responses: idx.iter().map(|&m| p.candidates[m].as_slice()).collect(),
            }
        })
        .collect();
    let router = RouterConfig {
        seed: config.router.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..config.router.clone()
    };
    let (matrices, ledger) = build_matrices(head, &router, layout, &groups, judge).await?;
    let samples: Vec<GroupSample> = picks
        .into_iter()
        .zip(matrices)
        .map(|((prompt, indices, old_log_probs), m)| GroupSample {
            prompt,
            indices,
            p_tilde: m.p,
            old_log_probs,
        })
        .collect();

    let mut first_loss = None;
    for _ in 0..config.update_epochs {
        let (loss, grad) = rloo_loss_and_grad(policy, prompts, &samples, config.kl_beta, config.clip_ratio)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch: 0,
                step,
                detail: format!("non-finite RLOO loss {loss}"),
            });
        }
        first_loss.get_or_insert(loss);
        policy.theta -= &grad * config.learning_rate;
    }
    Ok(StepReport {
        loss: first_loss.unwrap_or(f64::NAN),
        ledger,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_true_reward: f64,
    pub kl: f64,
    pub judge_calls: usize,
    pub fallbacks: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct AlignReport {
    pub policy: ToyPolicy,
    pub curve: Vec<CurvePoint>,
    pub ledger: CostLedger,
}

impl AlignReport {
    pub fn initial_reward(&self) -> f64 {
        self.curve.first().map_or(f64::NAN, |c| c.mean_true_reward)
    }

    pub fn final_reward(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |c| c.mean_true_reward)
    }
}

/// Expected true reward and KL of a policy, averaged over prompts.
pub fn policy_metrics(policy: &ToyPolicy, prompts: &[AlignPrompt], rewards: &[DVector<f64>]) -> Result<(f64, f64)> {
    let per: Vec<(f64, f64)> = prompts
        .par_iter()
        .zip(rewards)
        .map(|(p, r)| Ok((policy.probs(p)?.dot(r), policy.kl(p)?)))
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok((per.iter().map(|x| x.0).sum::<f64>() / n, per.iter().map(|x| x.1).sum::<f64>() / n))
}

/// True reward of every candidate of every prompt.
pub fn reward_table(truth: &GroundTruth, prompts: &[AlignPrompt]) -> Result<Vec<DVector<f64>>> {
    prompts
        .iter()
        .map(|p| {
            let r = p
                .candidates
                .iter()
                .map(|y| truth.reward(&p.context, y))
                .collect::<Result<Vec<_>>>()?;
            Ok(DVector::from_vec(r))
        })
        .collect()
}

/// Runs `epochs` passes of RLOO over the prompt set.
pub async fn align(
    config: &AlignConfig,
    prompts: &[AlignPrompt],
    head: &GpHead,
    judge: Option<&dyn Judge>,
    truth: &GroundTruth,
) -> Result<AlignReport> {
    config.validate()?;
    let first = prompts.first().ok_or_else(|| Error::invalid("no prompts to align on"))?;
    let item_dim = first.candidates.first().map_or(0, |c| c.len());
    let layout = PairLayout {
        context_dim: first.context.len(),
        item_dim,
    };
    if layout != truth.layout() {
        return Err(Error::invalid("prompt dimensions do not match the ground truth"));
    }
    let mut policy = ToyPolicy::new(layout.context_dim, layout.item_dim, config.init_scale, config.seed);
    for p in prompts {
        policy.check(p)?;
    }
    let rewards = reward_table(truth, prompts)?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x5EED_A11C);

    let (r0, kl0) = policy_metrics(&policy, prompts, &rewards)?;
    let mut curve = vec![CurvePoint {
        step: 0,
        mean_true_reward: r0,
        kl: kl0,
        judge_calls: 0,
        fallbacks: 0,
        loss: f64::NAN,
    }];
    let mut ledger = CostLedger::default();
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let report = rloo_step(&mut policy, prompts, batch, head, &layout, judge, config, step, &mut rng).await?;
            let (reward, kl) = policy_metrics(&policy, prompts, &rewards)?;
            curve.push(CurvePoint {
                step,
                mean_true_reward: reward,
                kl,
                judge_calls: report.ledger.judge_calls,
                fallbacks: report.ledger.fallbacks,
                loss: report.loss,
            });
            ledger.merge(&report.ledger);
        }
    }
    Ok(AlignReport { policy, curve, ledger })
}
