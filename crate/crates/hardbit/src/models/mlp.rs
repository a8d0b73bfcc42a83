//! Two-hidden-layer rectifier network with two output logits.
//!
//! Layout: `[W1 (h1 x d, row-major), b1, W2 (h2 x h1), b2, W3 (2 x h2), b3]`.
//! Loss is the softmax cross-entropy of the logits, computed in a numerically
//! stable form.

use rand_chacha::ChaCha8Rng;

use crate::featurespace::Label;

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

fn layout(d: usize, [h1, h2]: [usize; 2]) -> Layout {
    let w1 = 0;
    let b1 = w1 + h1 * d;
    let w2 = b1 + h1;
    let b2 = w2 + h2 * h1;
    let w3 = b2 + h2;
    let b3 = w3 + 2 * h2;
    Layout {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    }
}

pub(super) fn param_count(d: usize, hidden: [usize; 2]) -> usize {
    let l = layout(d, hidden);
    l.b3 + 2
}

pub(super) fn init(d: usize, [h1, h2]: [usize; 2], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = Vec::with_capacity(param_count(d, [h1, h2]));
    super::uniform_init(rng, 1.0 / (d as f64).sqrt(), h1 * d + h1, &mut params);
    super::uniform_init(rng, 1.0 / (h1 as f64).sqrt(), h2 * h1 + h2, &mut params);
    super::uniform_init(rng, 1.0 / (h2 as f64).sqrt(), 2 * h2 + 2, &mut params);
    params
}

pub(super) fn decay_ranges(d: usize, hidden: [usize; 2]) -> Vec<std::ops::Range<usize>> {
    let l = layout(d, hidden);
    vec![l.w1..l.b1, l.w2..l.b2, l.w3..l.b3]
}

struct Forward {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    z: [f64; 2],
}

fn forward_from_a0<F>(params: &[f64], d: usize, [h1, h2]: [usize; 2], first_layer: F) -> Forward
where
    F: Fn(&[f64], usize, usize) -> Vec<f64>,
{
    let l = layout(d, [h1, h2]);
    let mut z1 = first_layer(params, l.w1, h1);
    for (i, z) in z1.iter_mut().enumerate() {
        *z += params[l.b1 + i];
    }
    let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();

    let mut z2 = vec![0.0; h2];
    for i in 0..h2 {
        let row = l.w2 + i * h1;
        let mut acc = params[l.b2 + i];
        for j in 0..h1 {
            acc += params[row + j] * a1[j];
        }
        z2[i] = acc;
    }
    let a2: Vec<f64> = z2.iter().map(|&z| z.max(0.0)).collect();

    let mut z = [0.0; 2];
    for (k, zk) in z.iter_mut().enumerate() {
        let row = l.w3 + k * h2;
        let mut acc = params[l.b3 + k];
        for j in 0..h2 {
            acc += params[row + j] * a2[j];
        }
        *zk = acc;
    }
    Forward { z1, a1, z2, a2, z }
}

fn forward_sparse(params: &[f64], d: usize, hidden: [usize; 2], active: &[u32]) -> Forward {
    forward_from_a0(params, d, hidden, |p, w1, h1| {
        let mut z1 = vec![0.0; h1];
        for (i, z) in z1.iter_mut().enumerate() {
            let row = w1 + i * d;
            for &j in active {
                *z += p[row + j as usize];
            }
        }
        z1
    })
}

fn forward_dense(params: &[f64], d: usize, hidden: [usize; 2], x: &[f64]) -> Forward {
    forward_from_a0(params, d, hidden, |p, w1, h1| {
        let mut z1 = vec![0.0; h1];
        for (i, z) in z1.iter_mut().enumerate() {
            let row = w1 + i * d;
            for j in 0..d {
                *z += p[row + j] * x[j];
            }
        }
        z1
    })
}

pub(super) fn scores(params: &[f64], d: usize, hidden: [usize; 2], active: &[u32]) -> [f64; 2] {
    forward_sparse(params, d, hidden, active).z
}

pub(super) fn scores_dense(params: &[f64], d: usize, hidden: [usize; 2], x: &[f64]) -> [f64; 2] {
    forward_dense(params, d, hidden, x).z
}

/// Stable cross-entropy from logits.
pub(super) fn loss_from_scores(z: [f64; 2], y: Label) -> f64 {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    lse - z[y.as_u8() as usize]
}

fn softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

pub(super) fn loss(params: &[f64], d: usize, hidden: [usize; 2], active: &[u32], y: Label) -> f64 {
    loss_from_scores(scores(params, d, hidden, active), y)
}

/// Output deltas and hidden deltas shared by the two gradient directions.
struct Backward {
    delta1: Vec<f64>,
    delta2: Vec<f64>,
    delta3: [f64; 2],
}

fn backward(params: &[f64], d: usize, [h1, h2]: [usize; 2], f: &Forward, delta3: [f64; 2]) -> Backward {
    let l = layout(d, [h1, h2]);
    let mut delta2 = vec![0.0; h2];
    for j in 0..h2 {
        if f.z2[j] > 0.0 {
            let mut acc = 0.0;
            for (k, dk) in delta3.iter().enumerate() {
                acc += params[l.w3 + k * h2 + j] * dk;
            }
            delta2[j] = acc;
        }
    }
    let mut delta1 = vec![0.0; h1];
    for j in 0..h1 {
        if f.z1[j] > 0.0 {
            let mut acc = 0.0;
            for (i, di) in delta2.iter().enumerate() {
                acc += params[l.w2 + i * h1 + j] * di;
            }
            delta1[j] = acc;
        }
    }
    Backward {
        delta1,
        delta2,
        delta3,
    }
}

pub(super) fn loss_and_grad_input(
    params: &[f64],
    d: usize,
    hidden: [usize; 2],
    active: &[u32],
    y: Label,
) -> (f64, Vec<f64>) {
    let f = forward_sparse(params, d, hidden, active);
    let loss = loss_from_scores(f.z, y);
    let p = softmax(f.z);
    let mut delta3 = [p[0], p[1]];
    delta3[y.as_u8() as usize] -= 1.0;
    let back = backward(params, d, hidden, &f, delta3);

    let l = layout(d, hidden);
    let h1 = hidden[0];
    let mut grad = vec![0.0; d];
    for (i, &di) in back.delta1.iter().enumerate().take(h1) {
        if di != 0.0 {
            let row = l.w1 + i * d;
            for (j, g) in grad.iter_mut().enumerate() {
                *g += params[row + j] * di;
            }
        }
    }
    (loss, grad)
}

pub(super) fn loss_and_grad_params(
    params: &[f64],
    d: usize,
    hidden: [usize; 2],
    active: &[u32],
    y: Label,
) -> (f64, Vec<f64>) {
    let f = forward_sparse(params, d, hidden, active);
    let loss = loss_from_scores(f.z, y);
    let p = softmax(f.z);
    let mut delta3 = [p[0], p[1]];
    delta3[y.as_u8() as usize] -= 1.0;
    let back = backward(params, d, hidden, &f, delta3);

    let [h1, h2] = hidden;
    let l = layout(d, hidden);
    let mut grad = vec![0.0; params.len()];
    for (i, &di) in back.delta1.iter().enumerate() {
        if di != 0.0 {
            let row = l.w1 + i * d;
            for &j in active {
                grad[row + j as usize] = di;
            }
        }
        grad[l.b1 + i] = di;
    }
    for (i, &di) in back.delta2.iter().enumerate() {
        if di != 0.0 {
            let row = l.w2 + i * h1;
            for (j, &aj) in f.a1.iter().enumerate() {
                grad[row + j] = di * aj;
            }
        }
        grad[l.b2 + i] = di;
    }
    for (k, &dk) in back.delta3.iter().enumerate() {
        let row = l.w3 + k * h2;
        for (j, &aj) in f.a2.iter().enumerate() {
            grad[row + j] = dk * aj;
        }
        grad[l.b3 + k] = dk;
    }
    (loss, grad)
}

pub(super) fn margin_grad_input(
    params: &[f64],
    d: usize,
    hidden: [usize; 2],
    active: &[u32],
) -> Vec<f64> {
    let f = forward_sparse(params, d, hidden, active);
    let back = backward(params, d, hidden, &f, [-1.0, 1.0]);
    let l = layout(d, hidden);
    let mut grad = vec![0.0; d];
    for (i, &di) in back.delta1.iter().enumerate() {
        if di != 0.0 {
            let row = l.w1 + i * d;
            for (j, g) in grad.iter_mut().enumerate() {
                *g += params[row + j] * di;
            }
        }
    }
    grad
}
