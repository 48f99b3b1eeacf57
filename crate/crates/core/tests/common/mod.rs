//! Independent oracles and numerical helpers shared by the integration and
//! acceptance tests. Nothing here calls the code paths it is used to check.

#![allow(dead_code)]

use dilseg::network::{build_mini_fcrn, FcrnConfig, NetworkSpec};
use dilseg::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Like [`random_tensor`] but with every entry at least `gap` away from zero,
/// so piecewise-linear kinks are out of reach of finite differences.
pub fn random_tensor_away_from_zero(shape: Shape, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)` with a floor for all-zero vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sets every parameter of `net` from a flat vector in visiting order.
pub fn with_flat_params(net: &NetworkSpec, flat: &[f64]) -> NetworkSpec {
    let mut out = net.clone();
    let mut at = 0;
    out.visit_params_mut(|_, v| {
        v.copy_from_slice(&flat[at..at + v.len()]);
        at += v.len();
    });
    assert_eq!(at, flat.len());
    out
}

pub fn fcrn(widths: &[usize], classes: usize, k: usize, d: usize, os: usize, dropout: f64, seed: u64) -> NetworkSpec {
    build_mini_fcrn(&FcrnConfig {
        stage_widths: widths.to_vec(),
        blocks_per_stage: vec![1; widths.len()],
        num_classes: classes,
        classifier_kernel: k,
        classifier_dilation: d,
        output_stride: os,
        dropout_rate: dropout,
        in_channels: 3,
        init_seed: seed,
    })
    .unwrap()
}

/// Bootstrapped cross-entropy written out from the definition: softmax by
/// direct exponentiation (scores are small), then `-mean log p` over the
/// selected pixels.
pub fn naive_loss(scores: &Tensor, labels: &[u8], mask: &[bool]) -> f64 {
    let s = scores.shape();
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..s.h {
        for x in 0..s.w {
            let i = y * s.w + x;
            if !mask[i] {
                continue;
            }
            let z: f64 = (0..s.c).map(|c| scores.at(0, c, y, x).exp()).sum();
            let p = scores.at(0, labels[i] as usize, y, x).exp() / z;
            total -= p.ln();
            count += 1;
        }
    }
    total / count as f64
}

/// Hard-pixel selection by fully sorting the valid pixels by
/// `(probability, index)`: take the threshold set if it is big enough,
/// otherwise the first `min(k, #valid)` of the sorted order.
///
/// Probabilities are snapped to a 1e-12 grid first so that mathematically
/// equal values compare equal regardless of rounding in how they were computed.
pub fn sort_oracle_selection(p: &[f64], valid: &[bool], t: f64, k: usize) -> Vec<bool> {
    let p: Vec<f64> = p.iter().map(|v| (v * 1e12).round() / 1e12).collect();
    let mut order: Vec<usize> = (0..p.len()).filter(|&i| valid[i]).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(a.cmp(&b)));
    let below: Vec<usize> = order.iter().copied().filter(|&i| p[i] < t).collect();
    let floor = k.min(order.len());
    let chosen = if below.len() >= floor { below } else { order[..floor].to_vec() };
    let mut mask = vec![false; p.len()];
    for i in chosen {
        mask[i] = true;
    }
    mask
}

/// Pixel accuracy, mean accuracy and mean IoU from per-pixel counting,
/// without a confusion matrix. Classes absent from both truth and prediction
/// are skipped in the means.
pub fn naive_scores(pred: &[u8], truth: &[u8], classes: usize, ignore: u8) -> (f64, f64, f64) {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut accs = Vec::new();
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let mut tp = 0usize;
        let mut in_truth = 0usize;
        let mut in_either = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            if t == c && p == c {
                tp += 1;
            }
            if t == c {
                in_truth += 1;
            }
            if t == c || p == c {
                in_either += 1;
            }
        }
        if in_truth > 0 {
            accs.push(tp as f64 / in_truth as f64);
        }
        if in_either > 0 {
            ious.push(tp as f64 / in_either as f64);
        }
    }
    for (&p, &t) in pred.iter().zip(truth) {
        if t != ignore {
            total += 1;
            if p == t {
                correct += 1;
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (correct as f64 / total as f64, mean(&accs), mean(&ious))
}
