//! Linear margin model: one-layer network with hinge loss.
//!
//! Layout: `[w[0..d], b]`. The margin is `m = w.x + b`, scores are `(-m, m)`.

use rand_chacha::ChaCha8Rng;

use crate::featurespace::Label;

pub(super) fn param_count(d: usize) -> usize {
    d + 1
}

pub(super) fn init(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = Vec::with_capacity(d + 1);
    super::uniform_init(rng, 1.0 / (d as f64).sqrt(), d + 1, &mut params);
    params
}

pub(super) fn decay_ranges(d: usize) -> Vec<std::ops::Range<usize>> {
    vec![0..d]
}

fn margin(params: &[f64], d: usize, active: &[u32]) -> f64 {
    let mut m = params[d];
    for &i in active {
        m += params[i as usize];
    }
    m
}

/// +1 for malware, -1 for benign: the side of the margin the label demands.
fn sign(y: Label) -> f64 {
    match y {
        Label::Malware => 1.0,
        Label::Benign => -1.0,
    }
}

pub(super) fn scores(params: &[f64], d: usize, active: &[u32]) -> [f64; 2] {
    let m = margin(params, d, active);
    [-m, m]
}

pub(super) fn scores_dense(params: &[f64], d: usize, x: &[f64]) -> [f64; 2] {
    let mut m = params[d];
    for j in 0..d {
        m += params[j] * x[j];
    }
    [-m, m]
}

pub(super) fn loss_from_scores(scores: [f64; 2], y: Label) -> f64 {
    let m = scores[1];
    (1.0 - sign(y) * m).max(0.0)
}

pub(super) fn loss(params: &[f64], d: usize, active: &[u32], y: Label) -> f64 {
    loss_from_scores(scores(params, d, active), y)
}

pub(super) fn loss_and_grad_input(
    params: &[f64],
    d: usize,
    active: &[u32],
    y: Label,
) -> (f64, Vec<f64>) {
    let m = margin(params, d, active);
    let s = sign(y);
    let slack = 1.0 - s * m;
    let mut grad = vec![0.0; d];
    if slack > 0.0 {
        for j in 0..d {
            grad[j] = -s * params[j];
        }
    }
    (slack.max(0.0), grad)
}

pub(super) fn loss_and_grad_params(
    params: &[f64],
    d: usize,
    active: &[u32],
    y: Label,
) -> (f64, Vec<f64>) {
    let m = margin(params, d, active);
    let s = sign(y);
    let slack = 1.0 - s * m;
    let mut grad = vec![0.0; d + 1];
    if slack > 0.0 {
        for &i in active {
            grad[i as usize] = -s;
        }
        grad[d] = -s;
    }
    (slack.max(0.0), grad)
}

pub(super) fn margin_grad_input(params: &[f64], d: usize) -> Vec<f64> {
    // g1 - g0 = 2m, so the gradient is 2w.
    params[..d].iter().map(|&w| 2.0 * w).collect()
}
