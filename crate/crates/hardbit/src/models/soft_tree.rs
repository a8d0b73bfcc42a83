//! Soft decision tree: a complete binary tree whose inner nodes are sigmoid
//! gates over the input and whose leaves hold softmax class distributions.
//!
//! The prediction is the leaf mixture `pi_k = sum_l P_l(x) Q_l[k]`, where
//! `P_l` is the product of gate probabilities along the path to leaf `l`.
//! Scores are log mixture probabilities, so the shared cross-entropy formula
//! applies unchanged. Training adds a routing-balance penalty driving each
//! gate's path-weighted average activation toward 1/2, weighted by
//! `2^-depth`; the penalty uses batch statistics and therefore lives in
//! [`penalty_and_grad`] rather than the per-sample loss.
//!
//! Node indexing is heap order: children of node `i` are `2i+1` (left, gate
//! probability `1-p`) and `2i+2` (right, `p`); nodes past the inner count are
//! leaves. Layout: `[gate_0 (w, b), ..., gate_{I-1} (w, b), leaf logits (2 each)]`.

use rand_chacha::ChaCha8Rng;

use crate::featurespace::{BinarySample, Label};

const PROB_FLOOR: f64 = 1e-300;

fn inner_count(depth: usize) -> usize {
    (1 << depth) - 1
}

fn leaf_count(depth: usize) -> usize {
    1 << depth
}

pub(super) fn param_count(d: usize, depth: usize) -> usize {
    inner_count(depth) * (d + 1) + leaf_count(depth) * 2
}

pub(super) fn init(d: usize, depth: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = Vec::with_capacity(param_count(d, depth));
    super::uniform_init(
        rng,
        1.0 / (d as f64).sqrt(),
        inner_count(depth) * (d + 1),
        &mut params,
    );
    super::uniform_init(rng, 1.0, leaf_count(depth) * 2, &mut params);
    params
}

pub(super) fn decay_ranges(d: usize, depth: usize) -> Vec<std::ops::Range<usize>> {
    (0..inner_count(depth))
        .map(|i| {
            let base = i * (d + 1);
            base..base + d
        })
        .collect()
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn gate_offset(d: usize, node: usize) -> usize {
    node * (d + 1)
}

fn leaf_logits(params: &[f64], d: usize, depth: usize, leaf: usize) -> [f64; 2] {
    let base = inner_count(depth) * (d + 1) + leaf * 2;
    [params[base], params[base + 1]]
}

fn leaf_softmax(params: &[f64], d: usize, depth: usize, leaf: usize) -> [f64; 2] {
    let z = leaf_logits(params, d, depth, leaf);
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

struct Forward {
    /// Gate probability p_i per inner node.
    p: Vec<f64>,
    /// Arrival probability per tree node (inner nodes and leaves).
    reach: Vec<f64>,
    /// Leaf class distributions.
    q: Vec<[f64; 2]>,
    /// Mixture probabilities.
    pi: [f64; 2],
}

fn forward_with<F>(params: &[f64], d: usize, depth: usize, activation: F) -> Forward
where
    F: Fn(usize) -> f64, // gate pre-activation per inner node
{
    let inner = inner_count(depth);
    let leaves = leaf_count(depth);
    let total = inner + leaves;
    let p: Vec<f64> = (0..inner).map(|i| sigmoid(activation(i))).collect();
    let mut reach = vec![0.0; total];
    reach[0] = 1.0;
    for i in 0..inner {
        reach[2 * i + 1] = reach[i] * (1.0 - p[i]);
        reach[2 * i + 2] = reach[i] * p[i];
    }
    let q: Vec<[f64; 2]> = (0..leaves)
        .map(|l| leaf_softmax(params, d, depth, l))
        .collect();
    let mut pi = [0.0; 2];
    for l in 0..leaves {
        pi[0] += reach[inner + l] * q[l][0];
        pi[1] += reach[inner + l] * q[l][1];
    }
    Forward { p, reach, q, pi }
}

fn gate_preactivation_sparse(params: &[f64], d: usize, node: usize, active: &[u32]) -> f64 {
    let base = gate_offset(d, node);
    let mut a = params[base + d];
    for &j in active {
        a += params[base + j as usize];
    }
    a
}

fn forward_sparse(params: &[f64], d: usize, depth: usize, active: &[u32]) -> Forward {
    forward_with(params, d, depth, |i| {
        gate_preactivation_sparse(params, d, i, active)
    })
}

fn forward_dense(params: &[f64], d: usize, depth: usize, x: &[f64]) -> Forward {
    forward_with(params, d, depth, |i| {
        let base = gate_offset(d, i);
        let mut a = params[base + d];
        for j in 0..d {
            a += params[base + j] * x[j];
        }
        a
    })
}

fn scores_from_pi(pi: [f64; 2]) -> [f64; 2] {
    [pi[0].max(PROB_FLOOR).ln(), pi[1].max(PROB_FLOOR).ln()]
}

pub(super) fn scores(params: &[f64], d: usize, depth: usize, active: &[u32]) -> [f64; 2] {
    scores_from_pi(forward_sparse(params, d, depth, active).pi)
}

pub(super) fn scores_dense(params: &[f64], d: usize, depth: usize, x: &[f64]) -> [f64; 2] {
    scores_from_pi(forward_dense(params, d, depth, x).pi)
}

/// Same stable cross-entropy as the mlp; with log-probability scores the
/// log-sum-exp term is ~0 and this reduces to `-ln pi_y`.
pub(super) fn loss_from_scores(scores: [f64; 2], y: Label) -> f64 {
    let m = scores[0].max(scores[1]);
    let lse = m + ((scores[0] - m).exp() + (scores[1] - m).exp()).ln();
    lse - scores[y.as_u8() as usize]
}

pub(super) fn loss(params: &[f64], d: usize, depth: usize, active: &[u32], y: Label) -> f64 {
    loss_from_scores(scores(params, d, depth, active), y)
}

/// Leaf arrival probabilities for one input; sums to 1 up to rounding.
#[cfg(test)]
pub(super) fn leaf_reach(params: &[f64], d: usize, depth: usize, active: &[u32]) -> Vec<f64> {
    let f = forward_sparse(params, d, depth, active);
    f.reach[inner_count(depth)..].to_vec()
}

/// Subtree sums of per-leaf mass `reach_l * Q_l[k]`, indexed by tree node.
fn class_mass(f: &Forward, depth: usize, class: usize) -> Vec<f64> {
    let inner = inner_count(depth);
    let total = inner + leaf_count(depth);
    let mut s = vec![0.0; total];
    for node in (0..total).rev() {
        s[node] = if node >= inner {
            f.reach[node] * f.q[node - inner][class]
        } else {
            s[2 * node + 1] + s[2 * node + 2]
        };
    }
    s
}

pub(super) fn loss_and_grad_input(
    params: &[f64],
    d: usize,
    depth: usize,
    active: &[u32],
    y: Label,
) -> (f64, Vec<f64>) {
    let f = forward_sparse(params, d, depth, active);
    let loss = loss_from_scores(scores_from_pi(f.pi), y);
    let s = class_mass(&f, depth, y.as_u8() as usize);
    let inv = 1.0 / f.pi[y.as_u8() as usize].max(PROB_FLOOR);
    let mut grad = vec![0.0; d];
    for i in 0..inner_count(depth) {
        let ga = -inv * ((1.0 - f.p[i]) * s[2 * i + 2] - f.p[i] * s[2 * i + 1]);
        if ga != 0.0 {
            let base = gate_offset(d, i);
            for (j, g) in grad.iter_mut().enumerate() {
                *g += ga * params[base + j];
            }
        }
    }
    (loss, grad)
}

pub(super) fn loss_and_grad_params(
    params: &[f64],
    d: usize,
    depth: usize,
    active: &[u32],
    y: Label,
) -> (f64, Vec<f64>) {
    let f = forward_sparse(params, d, depth, active);
    let loss = loss_from_scores(scores_from_pi(f.pi), y);
    let yk = y.as_u8() as usize;
    let s = class_mass(&f, depth, yk);
    let inv = 1.0 / f.pi[yk].max(PROB_FLOOR);
    let inner = inner_count(depth);
    let mut grad = vec![0.0; params.len()];
    for i in 0..inner {
        let ga = -inv * ((1.0 - f.p[i]) * s[2 * i + 2] - f.p[i] * s[2 * i + 1]);
        if ga != 0.0 {
            let base = gate_offset(d, i);
            for &j in active {
                grad[base + j as usize] = ga;
            }
            grad[base + d] = ga;
        }
    }
    let leaf_base = inner * (d + 1);
    for l in 0..leaf_count(depth) {
        let q = f.q[l];
        let reach = f.reach[inner + l];
        for k in 0..2 {
            let delta = if k == yk { 1.0 } else { 0.0 };
            grad[leaf_base + l * 2 + k] = -inv * reach * q[yk] * (delta - q[k]);
        }
    }
    (loss, grad)
}

pub(super) fn margin_grad_input(
    params: &[f64],
    d: usize,
    depth: usize,
    active: &[u32],
) -> Vec<f64> {
    let f = forward_sparse(params, d, depth, active);
    let s0 = class_mass(&f, depth, 0);
    let s1 = class_mass(&f, depth, 1);
    let inv0 = 1.0 / f.pi[0].max(PROB_FLOOR);
    let inv1 = 1.0 / f.pi[1].max(PROB_FLOOR);
    let mut grad = vec![0.0; d];
    for i in 0..inner_count(depth) {
        let d1 = (1.0 - f.p[i]) * s1[2 * i + 2] - f.p[i] * s1[2 * i + 1];
        let d0 = (1.0 - f.p[i]) * s0[2 * i + 2] - f.p[i] * s0[2 * i + 1];
        let ga = inv1 * d1 - inv0 * d0;
        if ga != 0.0 {
            let base = gate_offset(d, i);
            for (j, g) in grad.iter_mut().enumerate() {
                *g += ga * params[base + j];
            }
        }
    }
    grad
}

fn node_depth(node: usize) -> u32 {
    (node + 1).ilog2()
}

/// Routing-balance penalty over a batch and its parameter gradient.
///
/// For each inner node, `alpha_i` is the path-probability-weighted batch
/// average of the gate probability; the penalty is
/// `lambda * sum_i 2^-depth(i) * -(ln alpha_i + ln(1 - alpha_i)) / 2`.
/// The value is added once per batch on top of the mean classification loss.
pub(crate) fn penalty_and_grad(
    params: &[f64],
    d: usize,
    depth: usize,
    lambda: f64,
    batch: &[&BinarySample],
) -> (f64, Vec<f64>) {
    let inner = inner_count(depth);
    let total = inner + leaf_count(depth);
    let mut a_sum = vec![0.0; inner];
    let mut z_sum = vec![0.0; inner];
    let mut cache: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(batch.len());
    for x in batch {
        let f = forward_sparse(params, d, depth, &x.active);
        for i in 0..inner {
            a_sum[i] += f.reach[i] * f.p[i];
            z_sum[i] += f.reach[i];
        }
        cache.push((f.p, f.reach));
    }

    let mut penalty = 0.0;
    let mut u = vec![0.0; inner];
    let mut v = vec![0.0; inner];
    for i in 0..inner {
        if z_sum[i] < 1e-12 {
            continue;
        }
        let alpha = (a_sum[i] / z_sum[i]).clamp(1e-6, 1.0 - 1e-6);
        let w = lambda * 0.5_f64.powi(node_depth(i) as i32);
        penalty += w * -0.5 * (alpha.ln() + (1.0 - alpha).ln());
        let kappa = w * -0.5 * (1.0 / alpha - 1.0 / (1.0 - alpha));
        u[i] = kappa / z_sum[i];
        v[i] = -kappa * alpha / z_sum[i];
    }

    let mut grad = vec![0.0; params.len()];
    let mut t_sub = vec![0.0; total];
    for (x, (p, reach)) in batch.iter().zip(&cache) {
        for node in (0..total).rev() {
            t_sub[node] = if node < inner {
                (u[node] * p[node] + v[node]) * reach[node]
                    + t_sub[2 * node + 1]
                    + t_sub[2 * node + 2]
            } else {
                0.0
            };
        }
        for i in 0..inner {
            let da = u[i] * reach[i] * p[i] * (1.0 - p[i]) + (1.0 - p[i]) * t_sub[2 * i + 2]
                - p[i] * t_sub[2 * i + 1];
            if da != 0.0 {
                let base = gate_offset(d, i);
                for &j in &x.active {
                    grad[base + j as usize] += da;
                }
                grad[base + d] += da;
            }
        }
    }
    (penalty, grad)
}
