//! Gaussian-process output layer on random features, trained as a pairwise
//! preference classifier, with a Laplace posterior covariance.
//!
//! After training, one frozen pass accumulates the precision
//! `tau I + sum_i sigmoid(g_i)(1 - sigmoid(g_i)) phi_i phi_i^T`
//! and inverts it. Predictions report the raw logit `g = phi^T beta`, the
//! uncertainty `u = sqrt(1 + lambda phi^T Sigma phi)` and the scaled reward
//! difference `p = g / u`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::rff::{Encoder, EncoderGrads, RandomFeatureMap};
use crate::sigmoid;

/// Floor on `sigmoid(g)(1 - sigmoid(g))` in the precision update.
pub const HESSIAN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpHeadConfig {
    pub tau: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_strength_scaling: bool,
    pub optimizer: OptimizerKind,
    pub warmup_ratio: f64,
    /// Cosine schedule floor as a fraction of the base rate.
    pub min_lr_ratio: f64,
}

impl Default for GpHeadConfig {
    fn default() -> Self {
        Self {
            tau: 1e-3,
            lambda: 10.0,
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 16,
            seed: 0,
            use_strength_scaling: true,
            optimizer: OptimizerKind::Sgd,
            warmup_ratio: 0.03,
            min_lr_ratio: 0.1,
        }
    }
}

impl GpHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau must be > 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::invalid("warmup_ratio must be in [0, 1) and min_lr_ratio in [0, 1]"));
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to `min_lr_ratio * learning_rate`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.learning_rate;
        let warmup = (self.warmup_ratio * total as f64).ceil() as usize;
        if step < warmup {
            return base * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        let min_lr = self.min_lr_ratio * base;
        min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCovariance {
    sigma: DMatrix<f64>,
    /// Lower-triangular `L` with `L L^T = Sigma^{-1}`.
    precision_chol: DMatrix<f64>,
    n_samples: usize,
}

impl PosteriorCovariance {
    /// Factors a precision matrix and inverts it.
    pub fn from_precision(precision: DMatrix<f64>, n_samples: usize) -> Result<Self> {
        let chol = Cholesky::new(precision)
            .ok_or_else(|| Error::Singular("precision matrix is not positive definite".into()))?;
        let l = chol.l();
        let inv = chol.inverse();
        let sigma = (&inv + inv.transpose()) * 0.5;
        Ok(Self {
            sigma,
            precision_chol: l,
            n_samples,
        })
    }

    pub(crate) fn from_parts(sigma: DMatrix<f64>, precision_chol: DMatrix<f64>, n_samples: usize) -> Result<Self> {
        if !sigma.is_square() || sigma.shape() != precision_chol.shape() {
            return Err(Error::invalid("covariance parts have inconsistent shapes"));
        }
        Ok(Self {
            sigma,
            precision_chol,
            n_samples,
        })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn precision_chol(&self) -> &DMatrix<f64> {
        &self.precision_chol
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// `phi^T Sigma phi`
    pub fn quad_form(&self, phi: &DVector<f64>) -> f64 {
        let s_phi = &self.sigma * phi;
        phi.dot(&s_phi).max(0.0)
    }
}

/// Streaming precision accumulator for the frozen covariance pass.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    precision: DMatrix<f64>,
    n_samples: usize,
}

impl CovarianceAccumulator {
    pub fn new(num_features: usize, tau: f64) -> Self {
        Self {
            precision: DMatrix::identity(num_features, num_features) * tau,
            n_samples: 0,
        }
    }

    /// Adds `max(s(1-s), floor) phi phi^T` with `s = sigmoid(logit)`.
    pub fn push(&mut self, phi: &DVector<f64>, logit: f64) {
        let s = sigmoid(logit);
        let weight = (s * (1.0 - s)).max(HESSIAN_FLOOR);
        self.precision.syger(weight, phi, phi, 1.0);
        self.n_samples += 1;
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Symmetric precision matrix accumulated so far.
    pub fn precision(&self) -> DMatrix<f64> {
        let mut p = self.precision.clone();
        p.fill_upper_triangle_with_lower_triangle();
        p
    }

    pub fn finish(self) -> Result<PosteriorCovariance> {
        let n = self.n_samples;
        PosteriorCovariance::from_precision(self.precision(), n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    /// Uncertainty-scaled reward difference.
    pub p: f64,
    /// Uncertainty, always >= 1.
    pub u: f64,
    /// Raw logit before scaling.
    pub g: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct GpHead {
    pub encoder: Encoder,
    pub feature_map: RandomFeatureMap,
    pub beta: DVector<f64>,
    pub covariance: Option<PosteriorCovariance>,
    pub config: GpHeadConfig,
}

/// Gradient of the mean loss over a batch.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub beta: DVector<f64>,
    pub encoder: EncoderGrads,
}

impl GpHead {
    pub fn new(encoder: Encoder, feature_map: RandomFeatureMap, config: GpHeadConfig) -> Result<Self> {
        config.validate()?;
        if encoder.output_dim() != feature_map.hidden_dim() {
            return Err(Error::invalid(format!(
                "encoder output {} does not match feature map input {}",
                encoder.output_dim(),
                feature_map.hidden_dim()
            )));
        }
        let beta = DVector::zeros(feature_map.num_features());
        Ok(Self {
            encoder,
            feature_map,
            beta,
            covariance: None,
            config,
        })
    }

    pub fn num_features(&self) -> usize {
        self.feature_map.num_features()
    }

    pub fn features(&self, x_pair: &[f64]) -> Result<DVector<f64>> {
        let h = self.encoder.encode(x_pair)?;
        Ok(self.feature_map.features_unchecked(&h))
    }

    /// Raw logit `g = phi(h(x))^T beta`.
    pub fn logit(&self, x_pair: &[f64]) -> Result<f64> {
        Ok(self.features(x_pair)?.dot(&self.beta))
    }

    fn strength_weight(&self, rec: &PreferenceRecord) -> f64 {
        if self.config.use_strength_scaling {
            f64::from(rec.strength)
        } else {
            1.0
        }
    }

    /// Per-record scaled BT loss on the raw logit.
    ///
    /// `z = 1` contributes `-s log sigmoid(g)` and `z = 0` contributes
    /// `-s log(1 - sigmoid(g))`, the probability that the second response wins.
    pub fn record_loss(&self, rec: &PreferenceRecord) -> Result<f64> {
        let g = self.logit(&rec.x_pair)?;
        Ok(self.strength_weight(rec) * bce_with_logit(g, rec.label))
    }

    pub fn mean_loss(&self, records: &[PreferenceRecord]) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let total: f64 = records
            .par_iter()
            .map(|r| self.record_loss(r))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        Ok(total / records.len() as f64)
    }

    /// Mean loss over `batch` and its gradient with respect to `beta` and the encoder.
    pub fn loss_and_grad(&self, batch: &[&PreferenceRecord]) -> Result<(f64, HeadGrads)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = HeadGrads {
            beta: DVector::zeros(self.num_features()),
            encoder: EncoderGrads::zeros_like(&self.encoder),
        };
        let mut loss = 0.0;
        for rec in batch {
            let cache = self.encoder.forward_cached(&rec.x_pair)?;
            let phi = self.feature_map.features_unchecked(&cache.output);
            let g = phi.dot(&self.beta);
            let s = self.strength_weight(rec);
            loss += s * bce_with_logit(g, rec.label);
            let dl_dg = s * (sigmoid(g) - f64::from(rec.label));
            grads.beta.axpy(scale * dl_dg, &phi, 1.0);
            let dl_dh = self.feature_map.logit_grad_wrt_hidden(&cache.output, &self.beta) * dl_dg;
            self.encoder.backward(&cache, &dl_dh, scale, &mut grads.encoder);
        }
        Ok((loss * scale, grads))
    }

    /// Mini-batch training of `beta` and the encoder; the feature map stays fixed.
    pub fn train(&mut self, records: &[PreferenceRecord]) -> Result<TrainReport> {
        if records.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        for r in records {
            if r.label > 1 || !(1..=3).contains(&r.strength) {
                return Err(Error::invalid(format!(
                    "record {} has label {} / strength {}",
                    r.id, r.label, r.strength
                )));
            }
        }
        self.covariance = None;
        let cfg = self.config.clone();
        let initial_loss = self.mean_loss(records)?;
        let batches_per_epoch = records.len().div_ceil(cfg.batch_size);
        let total_steps = batches_per_epoch * cfg.epochs;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut adam = (cfg.optimizer == OptimizerKind::Adam).then(|| AdamState::new(self));
        let mut report = TrainReport {
            initial_loss,
            ..TrainReport::default()
        };
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&PreferenceRecord> = chunk.iter().map(|&i| &records[i]).collect();
                let (loss, grads) = self.loss_and_grad(&batch)?;
                if !loss.is_finite() || !grads.beta.iter().all(|v| v.is_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        detail: format!(
                            "batch loss {loss}, |beta| = {:.3e}, lr = {:.3e}",
                            self.beta.norm(),
                            cfg.lr_at(step, total_steps)
                        ),
                    });
                }
                let lr = cfg.lr_at(step, total_steps);
                match adam.as_mut() {
                    Some(state) => state.step(self, &grads, lr),
                    None => {
                        self.beta.axpy(-lr, &grads.beta, 1.0);
                        self.encoder.apply_update(&grads.encoder, lr);
                    }
                }
                epoch_loss += loss * batch.len() as f64;
                report.step_losses.push(loss);
                step += 1;
            }
            report.epoch_losses.push(epoch_loss / records.len() as f64);
        }
        report.steps = step;
        report.final_loss = self.mean_loss(records)?;
        if !report.final_loss.is_finite() || !self.encoder.is_finite() {
            return Err(Error::Divergence {
                epoch: cfg.epochs,
                step,
                detail: format!("final loss {}", report.final_loss),
            });
        }
        Ok(report)
    }

    /// Frozen pass accumulating the Laplace precision over `records` in order.
    pub fn compute_covariance(&mut self, records: &[PreferenceRecord]) -> Result<&PosteriorCovariance> {
        let mut acc = CovarianceAccumulator::new(self.num_features(), self.config.tau);
        for rec in records {
            let phi = self.features(&rec.x_pair)?;
            let g = phi.dot(&self.beta);
            acc.push(&phi, g);
        }
        let cov = acc.finish().map_err(|e| match e {
            Error::Singular(m) => Error::Singular(format!("{m} (internal error: tau > 0 should guarantee PD)")),
            other => other,
        })?;
        Ok(self.covariance.insert(cov))
    }

    pub fn predict_pair(&self, x_pair: &[f64]) -> Result<PairScore> {
        let cov = self
            .covariance
            .as_ref()
            .ok_or_else(|| Error::State("prediction with uncertainty requires the covariance pass".into()))?;
        let phi = self.features(x_pair)?;
        let g = phi.dot(&self.beta);
        let u = (1.0 + self.config.lambda * cov.quad_form(&phi)).sqrt();
        Ok(PairScore { p: g / u, u, g })
    }

    /// Predictions for many pairs, in input order.
    pub fn predict_many(&self, pairs: &[&[f64]]) -> Result<Vec<PairScore>> {
        pairs.par_iter().map(|x| self.predict_pair(x)).collect()
    }
}

/// Binary cross-entropy `-[z log sigmoid(g) + (1-z) log sigmoid(-g)]`, stable for large |g|.
pub fn bce_with_logit(g: f64, label: u8) -> f64 {
    let signed = if label == 1 { g } else { -g };
    softplus(-signed)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

struct AdamState {
    m_beta: DVector<f64>,
    v_beta: DVector<f64>,
    m_enc: EncoderGrads,
    v_enc: EncoderGrads,
    t: i32,
}

impl AdamState {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(head: &GpHead) -> Self {
        Self {
            m_beta: DVector::zeros(head.num_features()),
            v_beta: DVector::zeros(head.num_features()),
            m_enc: EncoderGrads::zeros_like(&head.encoder),
            v_enc: EncoderGrads::zeros_like(&head.encoder),
            t: 0,
        }
    }

    fn step(&mut self, head: &mut GpHead, grads: &HeadGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let update = |param: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..param.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        };
        update(
            head.beta.as_mut_slice(),
            self.m_beta.as_mut_slice(),
            self.v_beta.as_mut_slice(),
            grads.beta.as_slice(),
        );
        for (l, layer) in head.encoder.layers.iter_mut().enumerate() {
            update(
                layer.weight.as_mut_slice(),
                self.m_enc.weights[l].as_mut_slice(),
                self.v_enc.weights[l].as_mut_slice(),
                grads.encoder.weights[l].as_slice(),
            );
            update(
                layer.bias.as_mut_slice(),
                self.m_enc.biases[l].as_mut_slice(),
                self.v_enc.biases[l].as_mut_slice(),
                grads.encoder.biases[l].as_slice(),
            );
        }
        head.encoder.renormalize();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::rff::EncoderConfig;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn head(d_r: usize, input_dim: usize, seed: u64) -> GpHead {
        let enc = Encoder::new(EncoderConfig {
            input_dim,
            hidden_dims: vec![8],
            hidden_dim_out: 4,
            seed,
            ..EncoderConfig::default()
        })
        .unwrap();
        let map = RandomFeatureMap::new(4, d_r, 1.0, seed + 1).unwrap();
        GpHead::new(enc, map, GpHeadConfig::default()).unwrap()
    }

    fn rec(x: Vec<f64>, label: u8, strength: u8) -> PreferenceRecord {
        PreferenceRecord {
            id: "r".into(),
            group_id: "g".into(),
            x_pair: x,
            label,
            strength,
            split: Split::IdTrain,
            true_delta: None,
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = GpHeadConfig {
            learning_rate: 1.0,
            warmup_ratio: 0.1,
            ..GpHeadConfig::default()
        };
        assert_relative_eq!(cfg.lr_at(9, 100), 1.0);
        assert!(cfg.lr_at(0, 100) < 0.2);
        assert_relative_eq!(cfg.lr_at(100, 100), 0.1, epsilon = 1e-12);
        assert!(cfg.lr_at(50, 100) < cfg.lr_at(20, 100));
    }

    #[test]
    fn zero_data_covariance_is_scaled_identity() {
        let mut h = head(16, 3, 0);
        let tau = h.config.tau;
        let cov = h.compute_covariance(&[]).unwrap();
        let expect = DMatrix::<f64>::identity(16, 16) / tau;
        assert_relative_eq!((cov.sigma() - expect).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn one_pair_matches_sherman_morrison() {
        let tau = 1e-3;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let phi = DVector::from_fn(12, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.3);
        let mut acc = CovarianceAccumulator::new(12, tau);
        acc.push(&phi, 0.0);
        let cov = acc.finish().unwrap();
        // (tau I + c phi phi^T)^-1 = I/tau - (c/tau^2) phi phi^T / (1 + c phi^T phi / tau)
        let c = 0.25;
        let denom = 1.0 + c * phi.dot(&phi) / tau;
        let expect = DMatrix::<f64>::identity(12, 12) / tau - (&phi * phi.transpose()) * (c / (tau * tau) / denom);
        let rel = (cov.sigma() - &expect).norm() / expect.norm();
        assert!(rel < 1e-9, "relative error {rel}");
    }

    #[test]
    fn predict_requires_covariance() {
        let h = head(8, 3, 0);
        assert!(matches!(h.predict_pair(&[0.0, 0.1, 0.2]), Err(Error::State(_))));
    }

    #[test]
    fn lambda_zero_disables_scaling() {
        let mut h = head(16, 3, 2);
        h.config.lambda = 0.0;
        h.beta = DVector::from_fn(16, |i, _| (i as f64 * 0.37).sin());
        h.compute_covariance(&[]).unwrap();
        let s = h.predict_pair(&[0.5, -0.3, 1.0]).unwrap();
        assert_eq!(s.u, 1.0);
        assert_eq!(s.p, s.g);
    }

    #[test]
    fn uncertainty_invariant_to_beta_sign() {
        let mut h = head(16, 3, 2);
        h.beta = DVector::from_fn(16, |i, _| (i as f64 * 0.37).cos());
        let data: Vec<_> = (0..10).map(|i| rec(vec![i as f64 * 0.1, 0.2, -0.1], 1, 1)).collect();
        h.compute_covariance(&data).unwrap();
        let a = h.predict_pair(&[0.3, 0.3, 0.3]).unwrap();
        h.beta.neg_mut();
        let b = h.predict_pair(&[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.p, -b.p);
        assert!(a.u >= 1.0);
        assert_eq!(a.p, a.g / a.u);
    }

    #[test]
    fn unit_strength_scaling_is_noop() {
        let mut h = head(16, 3, 4);
        h.beta = DVector::from_fn(16, |i, _| 0.1 * i as f64);
        let data: Vec<_> = (0..8).map(|i| rec(vec![i as f64 * 0.2, -0.1, 0.4], (i % 2) as u8, 1)).collect();
        let a = h.mean_loss(&data).unwrap();
        h.config.use_strength_scaling = false;
        let b = h.mean_loss(&data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_rejects_empty_and_bad_records() {
        let mut h = head(8, 3, 0);
        assert!(matches!(h.train(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(h.train(&[rec(vec![0.0; 3], 1, 0)]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn train_diverges_loudly() {
        let mut h = head(8, 3, 0);
        h.config.learning_rate = 1e300;
        h.config.warmup_ratio = 0.0;
        let data: Vec<_> = (0..16).map(|i| rec(vec![i as f64, -(i as f64), 1.0], (i % 2) as u8, 3)).collect();
        assert!(matches!(h.train(&data), Err(Error::Divergence { .. })));
    }

    #[test]
    fn bce_is_stable() {
        assert_relative_eq!(bce_with_logit(0.0, 1), std::f64::consts::LN_2);
        assert!(bce_with_logit(1000.0, 1) < 1e-300);
        assert_relative_eq!(bce_with_logit(1000.0, 0), 1000.0);
        assert_relative_eq!(bce_with_logit(2.0, 0), bce_with_logit(-2.0, 1));
    }
}
