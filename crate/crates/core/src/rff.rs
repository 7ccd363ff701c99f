//! Spectrally-normalized feed-forward encoder and the random Fourier feature
//! map that turns hidden states into GP features.
//!
//! The feature map realizes
//!
//! `phi(h) = sqrt(2 sigma_k^2 / D_r) * cos(W h + b)`
//!
//! with `W_ij ~ N(0, 1)` and `b_i ~ U[0, 2pi)`, so that `phi(h1)^T phi(h2)`
//! is an unbiased estimate of the Gaussian kernel
//! `sigma_k^2 exp(-|h1 - h2|^2 / 2)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub hidden_dim_out: usize,
    pub spectral_bound: f64,
    pub power_iterations: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 24,
            hidden_dims: vec![64, 64],
            hidden_dim_out: 32,
            spectral_bound: 1.0,
            power_iterations: 5,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim_out == 0 {
            return Err(Error::invalid("encoder input_dim and hidden_dim_out must be >= 1"));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("hidden layer widths must be >= 1"));
        }
        if !(self.spectral_bound > 0.0 && self.spectral_bound.is_finite()) {
            return Err(Error::invalid("spectral_bound must be a positive finite number"));
        }
        if self.power_iterations == 0 {
            return Err(Error::invalid("power_iterations must be >= 1"));
        }
        Ok(())
    }

    /// Layer shapes as `(out, in)` pairs from input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.hidden_dim_out);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// Estimates the top singular value of `w` by power iteration, updating the
/// left singular vector estimate `u` in place.
pub fn power_iteration(w: &DMatrix<f64>, u: &mut DVector<f64>, iterations: usize) -> f64 {
    let mut sigma = 0.0;
    for _ in 0..iterations.max(1) {
        let mut v = w.tr_mul(u);
        let vn = v.norm();
        if vn == 0.0 {
            return 0.0;
        }
        v /= vn;
        let wv = w * &v;
        sigma = wv.norm();
        if sigma == 0.0 {
            return 0.0;
        }
        *u = wv / sigma;
    }
    sigma
}

fn start_vector(n: usize) -> DVector<f64> {
    // fixed, non-degenerate start so the pure variant is deterministic
    let v = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64) * 0.618_033_988_75).fract());
    let norm = v.norm();
    v / norm
}

/// Rescales `weight` so its estimated top singular value does not exceed `bound`.
pub fn spectral_normalize(weight: &DMatrix<f64>, bound: f64, iterations: usize) -> Result<DMatrix<f64>> {
    if weight.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("weight matrix contains non-finite entries"));
    }
    if !(bound > 0.0) || iterations == 0 {
        return Err(Error::invalid("spectral bound must be > 0 and iterations >= 1"));
    }
    let mut u = start_vector(weight.nrows());
    let sigma = power_iteration(weight, &mut u, iterations);
    Ok(rescale(weight, bound, sigma))
}

fn rescale(weight: &DMatrix<f64>, bound: f64, sigma: f64) -> DMatrix<f64> {
    let factor = if sigma > 0.0 { (bound / sigma).min(1.0) } else { 1.0 };
    if factor < 1.0 {
        weight * factor
    } else {
        weight.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Persistent left singular vector estimate for warm-started power iteration.
    pub u: DVector<f64>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Layer>,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the raw feature vector).
    pub inputs: Vec<DVector<f64>>,
    pub pre_activations: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(encoder: &Encoder) -> Self {
        Self {
            weights: encoder
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: encoder.layers.iter().map(|l| DVector::zeros(l.out_dim())).collect(),
        }
    }
}

impl Encoder {
    /// Builds an encoder with orthogonal weights scaled to the spectral bound
    /// and zero biases.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let weight = orthogonal(out, inp, &mut rng) * config.spectral_bound;
                Layer {
                    weight,
                    bias: DVector::zeros(out),
                    u: start_vector(out),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Builds an encoder from explicit layer weights and biases.
    pub fn from_weights(config: EncoderConfig, weights: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != weights.len() {
            return Err(Error::invalid(format!(
                "expected {} layers, got {}",
                shapes.len(),
                weights.len()
            )));
        }
        let mut layers = Vec::with_capacity(weights.len());
        for ((out, inp), (w, b)) in shapes.into_iter().zip(weights) {
            if w.shape() != (out, inp) || b.len() != out {
                return Err(Error::invalid(format!(
                    "layer shape mismatch: expected {out}x{inp}, got {}x{} with bias {}",
                    w.nrows(),
                    w.ncols(),
                    b.len()
                )));
            }
            layers.push(Layer {
                weight: w,
                bias: b,
                u: start_vector(out),
            });
        }
        Ok(Self { config, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden_dim_out
    }

    pub fn encode(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let act = self.config.activation;
        let mut h = DVector::from_column_slice(x);
        for layer in &self.layers {
            let mut z = &layer.weight * &h + &layer.bias;
            z.apply(|v| *v = act.apply(*v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let act = self.config.activation;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = DVector::from_column_slice(x);
        for layer in &self.layers {
            let z = &layer.weight * &h + &layer.bias;
            let next = z.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(ForwardCache {
            inputs,
            pre_activations: pre,
            output: h,
        })
    }

    /// Accumulates `scale * dL/dparams` into `grads` given `dL/dh` at the output.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DVector<f64>, scale: f64, grads: &mut EncoderGrads) {
        let act = self.config.activation;
        let mut delta = grad_out.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[idx];
            for (d, zi) in delta.iter_mut().zip(z.iter()) {
                *d *= act.derivative(*zi);
            }
            grads.weights[idx].ger(scale, &delta, &cache.inputs[idx], 1.0);
            grads.biases[idx].axpy(scale, &delta, 1.0);
            if idx > 0 {
                delta = layer.weight.tr_mul(&delta);
            }
        }
    }

    /// Applies `param -= lr * grad` and re-imposes the spectral bound on every layer.
    pub fn apply_update(&mut self, grads: &EncoderGrads, lr: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            layer.weight.zip_apply(gw, |w, g| *w -= lr * g);
            layer.bias.axpy(-lr, gb, 1.0);
        }
        self.renormalize();
    }

    /// Warm-started power iteration per layer followed by rescaling to the bound.
    pub fn renormalize(&mut self) {
        let bound = self.config.spectral_bound;
        let iters = self.config.power_iterations;
        for layer in &mut self.layers {
            let sigma = power_iteration(&layer.weight, &mut layer.u, iters);
            if sigma > bound {
                layer.weight *= bound / sigma;
            }
        }
    }

    /// Power-iteration estimate of each layer's top singular value (fresh start).
    pub fn spectral_norms(&self, iterations: usize) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| {
                let mut u = l.u.clone();
                power_iteration(&l.weight, &mut u, iterations)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "feature vector has length {}, encoder expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }
}

fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::from_fn(tall_r, tall_c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // sign-fix columns so the draw is uniform on the Stiefel manifold
    let r = qr.r();
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureMap {
    /// `D_r x D_h`, entries i.i.d. standard normal.
    w: DMatrix<f64>,
    /// Phases, i.i.d. uniform on `[0, 2pi)`.
    b: DVector<f64>,
    sigma_k: f64,
    seed: u64,
}

impl RandomFeatureMap {
    pub fn new(hidden_dim: usize, num_features: usize, sigma_k: f64, seed: u64) -> Result<Self> {
        if hidden_dim == 0 || num_features == 0 {
            return Err(Error::invalid("feature map dimensions must be >= 1"));
        }
        if !(sigma_k > 0.0 && sigma_k.is_finite()) {
            return Err(Error::invalid("sigma_k must be positive and finite"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(num_features, hidden_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let b = DVector::from_fn(num_features, |_, _| rng.sample(phase));
        Ok(Self { w, b, sigma_k, seed })
    }

    pub(crate) fn from_parts(w: DMatrix<f64>, b: DVector<f64>, sigma_k: f64, seed: u64) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(Error::invalid("feature map W rows and b length differ"));
        }
        Ok(Self { w, b, sigma_k, seed })
    }

    pub fn num_features(&self) -> usize {
        self.w.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn sigma_k(&self) -> f64 {
        self.sigma_k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn phases(&self) -> &DVector<f64> {
        &self.b
    }

    /// `sqrt(2 sigma_k^2 / D_r)`, the bound on every feature entry.
    pub fn amplitude(&self) -> f64 {
        (2.0 * self.sigma_k * self.sigma_k / self.num_features() as f64).sqrt()
    }

    pub fn features(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        if h.len() != self.hidden_dim() {
            return Err(Error::invalid(format!(
                "hidden state has length {}, feature map expects {}",
                h.len(),
                self.hidden_dim()
            )));
        }
        Ok(self.features_unchecked(h))
    }

    pub(crate) fn features_unchecked(&self, h: &DVector<f64>) -> DVector<f64> {
        let amp = self.amplitude();
        let mut z = &self.w * h + &self.b;
        z.apply(|v| *v = amp * v.cos());
        z
    }

    /// `d g / d h` for `g = phi(h)^T beta`.
    pub(crate) fn logit_grad_wrt_hidden(&self, h: &DVector<f64>, beta: &DVector<f64>) -> DVector<f64> {
        let amp = self.amplitude();
        let z = &self.w * h + &self.b;
        let s = DVector::from_fn(z.len(), |i, _| -amp * z[i].sin() * beta[i]);
        self.w.tr_mul(&s)
    }
}
