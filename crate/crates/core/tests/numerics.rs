mod common;

use common::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use uqroute::rff::RandomFeatureMap;
use uqroute::rloo::{rloo_loss_and_grad, GroupSample, ToyPolicy};
use uqroute::sngp::CovarianceAccumulator;

#[test]
fn features_match_the_cosine_formula() {
    let map = RandomFeatureMap::new(6, 64, 1.7, 11).unwrap();
    let mut r = rng(1);
    for _ in 0..10 {
        let h = normal_vec(&mut r, 6, 2.0);
        let lib = map.features(&DVector::from_vec(h.clone())).unwrap();
        let want = rff_oracle(&map, &h);
        for (a, b) in lib.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn kernel_estimate_converges_to_rbf() {
    // Fewer pairs than the acceptance run, same 3-SE rule.
    let mut r = rng(2);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
        .map(|_| {
            let a = normal_vec(&mut r, 8, 0.4);
            let b = normal_vec(&mut r, 8, 0.4);
            (a, b)
        })
        .collect();
    let seeds = 60;
    for (a, b) in &pairs {
        let ests: Vec<f64> = (0..seeds)
            .map(|s| {
                let map = RandomFeatureMap::new(8, 512, 1.3, 1000 + s).unwrap();
                let fa = map.features(&DVector::from_vec(a.clone())).unwrap();
                let fb = map.features(&DVector::from_vec(b.clone())).unwrap();
                fa.dot(&fb)
            })
            .collect();
        let mean = ests.iter().sum::<f64>() / seeds as f64;
        let var = ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (seeds - 1) as f64;
        let se = (var / seeds as f64).sqrt();
        let target = rbf(a, b, 1.3);
        assert!((mean - target).abs() <= 3.0 * se, "mean {mean} target {target} se {se}");
    }
}

#[test]
fn streaming_covariance_matches_dense_inverse() {
    let head = small_head(5, 16, 3);
    let records = random_records(50, 5, 4);
    let mut h = head.clone();
    let sigma = h.compute_covariance(&records).unwrap().sigma().clone();

    let phis: Vec<Vec<f64>> = records.iter().map(|r| head.features(&r.x_pair).unwrap().as_slice().to_vec()).collect();
    let logits: Vec<f64> = phis
        .iter()
        .map(|p| p.iter().zip(head.beta.iter()).map(|(a, b)| a * b).sum())
        .collect();
    let oracle = brute_force_covariance(&phis, &logits, head.config.tau);
    assert!(frobenius_rel(&sigma, &oracle) < 1e-8);
    assert_eq!(sigma, sigma.transpose());
    let eig = SymmetricEigen::new(sigma).eigenvalues;
    assert!(eig.iter().all(|&l| l > 0.0 && l <= 1.0 / head.config.tau + 1e-6));
}

#[test]
fn accumulation_order_does_not_matter_beyond_rounding() {
    let mut r = rng(5);
    let phis: Vec<DVector<f64>> = (0..40).map(|_| DVector::from_vec(normal_vec(&mut r, 12, 0.3))).collect();
    let gs: Vec<f64> = (0..40).map(|_| r.random_range(-4.0..4.0)).collect();
    let mut fwd = CovarianceAccumulator::new(12, 1e-3);
    let mut rev = CovarianceAccumulator::new(12, 1e-3);
    for i in 0..40 {
        fwd.push(&phis[i], gs[i]);
        rev.push(&phis[39 - i], gs[39 - i]);
    }
    let a = fwd.finish().unwrap();
    let b = rev.finish().unwrap();
    let diff = (a.sigma() - b.sigma()).norm() / a.sigma().norm();
    assert!(diff < 1e-10);
    assert_eq!(a.n_samples(), 40);
}

#[test]
fn extreme_logits_hit_the_hessian_floor() {
    // With |g| huge the data term vanishes and Sigma stays at I / tau.
    let phis = vec![vec![0.5; 4]; 3];
    let logits = vec![800.0, -800.0, 900.0];
    let mut acc = CovarianceAccumulator::new(4, 0.5);
    for (p, &g) in phis.iter().zip(&logits) {
        acc.push(&DVector::from_vec(p.clone()), g);
    }
    let lib = acc.finish().unwrap();
    let oracle = brute_force_covariance(&phis, &logits, 0.5);
    assert!(frobenius_rel(lib.sigma(), &oracle) < 1e-12);
    assert!((lib.sigma()[(0, 0)] - 2.0).abs() < 1e-9);
}

#[test]
fn beta_gradient_matches_oracle_finite_differences() {
    let head = small_head(5, 64, 6);
    let records = random_records(16, 5, 7);
    let batch: Vec<_> = records.iter().collect();
    let (loss, grads) = head.loss_and_grad(&batch).unwrap();

    let phis: Vec<Vec<f64>> = records.iter().map(|r| head.features(&r.x_pair).unwrap().as_slice().to_vec()).collect();
    let oracle = |beta: &[f64]| -> f64 {
        records
            .iter()
            .zip(&phis)
            .map(|(r, phi)| {
                let g: f64 = phi.iter().zip(beta).map(|(a, b)| a * b).sum();
                scaled_bt_loss(g, r.label, f64::from(r.strength))
            })
            .sum::<f64>()
            / records.len() as f64
    };
    assert!((oracle(head.beta.as_slice()) - loss).abs() < 1e-12);
    let fd = central_diff(oracle, head.beta.as_slice(), 1e-6);
    assert!(rel_err(grads.beta.as_slice(), &fd) < 1e-6);
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let head = small_head(4, 32, 8);
    let records = random_records(8, 4, 9);
    let batch: Vec<_> = records.iter().collect();
    let (_, grads) = head.loss_and_grad(&batch).unwrap();
    for layer in 0..head.encoder.layers.len() {
        let w0 = head.encoder.layers[layer].weight.clone();
        let f = |flat: &[f64]| -> f64 {
            let mut h = head.clone();
            h.encoder.layers[layer].weight = DMatrix::from_column_slice(w0.nrows(), w0.ncols(), flat);
            h.loss_and_grad(&batch).unwrap().0
        };
        let fd = central_diff(f, w0.as_slice(), 1e-6);
        let err = rel_err(grads.encoder.weights[layer].as_slice(), &fd);
        assert!(err < 1e-5, "layer {layer}: {err}");
    }
}

fn rloo_case(clip: Option<f64>, kl_beta: f64) {
    let (dc, di, k) = (3, 4, 4);
    let prompts = random_prompts(3, 7, dc, di, 10);
    let mut policy = ToyPolicy::new(dc, di, 0.4, 11);
    let mut r = rng(12);
    policy.theta.iter_mut().for_each(|t| *t += r.random_range(-0.3..0.3));
    let groups: Vec<(usize, Vec<usize>, Vec<Vec<f64>>)> = (0..3)
        .map(|p| {
            let idx: Vec<usize> = (0..k).map(|i| (i * 2 + p) % 7).collect();
            let mut m = vec![vec![0.0; k]; k];
            for i in 0..k {
                for j in (i + 1)..k {
                    let v: f64 = r.random_range(-2.0..2.0);
                    m[i][j] = v;
                    m[j][i] = -v;
                }
            }
            (p, idx, m)
        })
        .collect();
    let samples: Vec<GroupSample> = groups
        .iter()
        .map(|(p, idx, m)| {
            let lp = policy.log_probs(&prompts[*p]).unwrap();
            GroupSample {
                prompt: *p,
                indices: idx.clone(),
                p_tilde: DMatrix::from_fn(k, k, |i, j| m[i][j]),
                // Slightly stale sampler so the ratio is not 1.
                old_log_probs: idx.iter().map(|&i| lp[i] + 0.05 * (i as f64 - 3.0)).collect(),
            }
        })
        .collect();
    let (loss, grad) = rloo_loss_and_grad(&policy, &prompts, &samples, kl_beta, clip).unwrap();

    // Row-major flattening for the oracle.
    let flat = |m: &DMatrix<f64>| -> Vec<f64> { (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect() };
    let reference = flat(&policy.reference);
    let analytic = flat(&grad);
    let fd = match clip {
        None => {
            let oracle = |t: &[f64]| rloo_loss_oracle(t, &reference, di, &prompts, &groups, kl_beta);
            assert!((oracle(&flat(&policy.theta)) - loss).abs() < 1e-12);
            central_diff(oracle, &flat(&policy.theta), 1e-6)
        }
        Some(_) => {
            let f = |t: &[f64]| {
                let mut p = policy.clone();
                p.theta = DMatrix::from_row_slice(dc + 1, di, t);
                rloo_loss_and_grad(&p, &prompts, &samples, kl_beta, clip).unwrap().0
            };
            central_diff(f, &flat(&policy.theta), 1e-6)
        }
    };
    let err = rel_err(&analytic, &fd);
    assert!(err < 1e-6, "clip {clip:?} kl {kl_beta}: {err}");
}

#[test]
fn rloo_gradient_matches_oracle_finite_differences() {
    rloo_case(None, 0.0);
    rloo_case(None, 0.2);
}

#[test]
fn clipped_rloo_gradient_matches_finite_differences() {
    rloo_case(Some(0.2), 0.05);
}
