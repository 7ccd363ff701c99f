//! Test-side oracles written independently of the library code paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqroute::data::{AlignPrompt, PreferenceRecord, Split};
use uqroute::rff::{Encoder, EncoderConfig, RandomFeatureMap};
use uqroute::sngp::{GpHead, GpHeadConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller, so the oracle side shares no sampler with the library.
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sigma_k^2 exp(-|a - b|^2 / 2)`.
pub fn rbf(a: &[f64], b: &[f64], sigma_k: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sigma_k * sigma_k * (-d2 / 2.0).exp()
}

/// `sqrt(2 sigma_k^2 / D) cos(W h + b)` from the map's raw parameters.
pub fn rff_oracle(map: &RandomFeatureMap, h: &[f64]) -> Vec<f64> {
    let w = map.projection();
    let b = map.phases();
    let d = w.nrows();
    let amp = (2.0 * map.sigma_k() * map.sigma_k() / d as f64).sqrt();
    (0..d)
        .map(|i| {
            let z: f64 = (0..w.ncols()).map(|j| w[(i, j)] * h[j]).sum::<f64>() + b[i];
            amp * z.cos()
        })
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix in oracle");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for row in 0..n {
            if row != col {
                let f = m[row][col];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Dense Laplace precision `tau I + sum max(s(1-s), 1e-12) phi phi^T`, then its inverse.
pub fn brute_force_covariance(phis: &[Vec<f64>], logits: &[f64], tau: f64) -> Vec<Vec<f64>> {
    let d = phis[0].len();
    let mut p = vec![vec![0.0; d]; d];
    for (i, row) in p.iter_mut().enumerate() {
        row[i] = tau;
    }
    for (phi, &g) in phis.iter().zip(logits) {
        let s = logistic(g);
        let w = (s * (1.0 - s)).max(1e-12);
        for i in 0..d {
            for j in 0..d {
                p[i][j] += w * phi[i] * phi[j];
            }
        }
    }
    gauss_jordan_inverse(&p)
}

/// Strength-scaled pairwise log loss, written from the definition.
pub fn scaled_bt_loss(g: f64, label: u8, strength: f64) -> f64 {
    let p = logistic(g);
    let z = f64::from(label);
    -strength * (z * p.ln() + (1.0 - z) * (1.0 - p).ln())
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b|_2 / |b|_2`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn frobenius_rel(a: &DMatrix<f64>, b: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            num += (a[(i, j)] - v).powi(2);
            den += v * v;
        }
    }
    (num / den).sqrt()
}

pub fn record(id: usize, x_pair: Vec<f64>, label: u8, strength: u8) -> PreferenceRecord {
    PreferenceRecord {
        id: format!("r{id}"),
        group_id: format!("g{id}"),
        x_pair,
        label,
        strength,
        split: Split::IdTrain,
        true_delta: None,
    }
}

/// Random records over a `dim`-wide input.
pub fn random_records(n: usize, dim: usize, seed: u64) -> Vec<PreferenceRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let x = normal_vec(&mut r, dim, 1.0);
            let label = u8::from(r.random::<bool>());
            let strength = r.random_range(1..=3u8);
            record(i, x, label, strength)
        })
        .collect()
}

/// Small untrained head with a random `beta`.
pub fn small_head(input_dim: usize, num_features: usize, seed: u64) -> GpHead {
    let encoder = Encoder::new(EncoderConfig {
        input_dim,
        hidden_dims: vec![16, 12],
        hidden_dim_out: 8,
        seed,
        ..EncoderConfig::default()
    })
    .unwrap();
    let map = RandomFeatureMap::new(8, num_features, 1.0, seed + 1).unwrap();
    let mut head = GpHead::new(encoder, map, GpHeadConfig::default()).unwrap();
    let mut r = rng(seed + 2);
    head.beta = DVector::from_vec(normal_vec(&mut r, num_features, 1.0));
    head
}

pub fn random_prompts(n: usize, candidates: usize, dc: usize, di: usize, seed: u64) -> Vec<AlignPrompt> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| AlignPrompt {
            id: format!("q{i}"),
            context: normal_vec(&mut r, dc, 1.0),
            candidates: (0..candidates).map(|_| normal_vec(&mut r, di, 1.0)).collect(),
            ood: false,
        })
        .collect()
}

/// RLOO objective from the definition, over a row-major `theta`.
pub fn rloo_loss_oracle(
    theta: &[f64],
    reference: &[f64],
    di: usize,
    prompts: &[AlignPrompt],
    groups: &[(usize, Vec<usize>, Vec<Vec<f64>>)],
    kl_beta: f64,
) -> f64 {
    let log_softmax = |t: &[f64], p: &AlignPrompt| -> Vec<f64> {
        let mut ctx = p.context.clone();
        ctx.push(1.0);
        let s: Vec<f64> = p
            .candidates
            .iter()
            .map(|y| {
                let mut acc = 0.0;
                for (r, c) in ctx.iter().enumerate() {
                    for (k, yk) in y.iter().enumerate() {
                        acc += c * t[r * di + k] * yk;
                    }
                }
                acc
            })
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        s.iter().map(|v| v - z.ln()).collect()
    };
    let mut total = 0.0;
    for (prompt, idx, p) in groups {
        let k = idx.len();
        let lp = log_softmax(theta, &prompts[*prompt]);
        let lr = log_softmax(reference, &prompts[*prompt]);
        let mut loss = 0.0;
        for i in 0..k {
            let adv: f64 = (0..k).filter(|&j| j != i).map(|j| p[i][j]).sum::<f64>() / (k - 1) as f64;
            loss -= adv * lp[idx[i]];
        }
        loss /= k as f64;
        let kl: f64 = lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
        total += loss + kl_beta * kl;
    }
    total / groups.len() as f64
}
