//! Gradient-guided multi-flip attack.
//!
//! Each iteration takes the input-space loss gradient at the current point,
//! scores every admissible flip by its first-order loss increase
//! (`+grad_i` for 0 -> 1, `-grad_i` for 1 -> 0), and applies the
//! positive-score flips in descending order while the budget allows. The
//! highest-loss iterate seen so far is retained and returned, so a larger
//! budget never loses an evasion found at a smaller one.
//!
//! On the hinge plateau of a confident linear model the loss gradient is
//! identically zero; there the scoring falls back to the descent direction of
//! the malware score margin, which lets the attack reach the loss-active
//! region instead of stalling.

use super::{
    admissible_flips, require_true_positive, AttackOutcome, Budget, FlipState, Move, TraceStep,
};
use crate::error::Result;
use crate::featurespace::{BinarySample, Label, MutationPolicy};
use crate::models::Model;

pub fn attack_pgd_binary(
    model: &Model,
    x: &BinarySample,
    budget: &Budget,
    iters: usize,
    policy: MutationPolicy,
) -> Result<AttackOutcome> {
    require_true_positive(model, x)?;
    let d = model.dimension();
    let mut state = FlipState::new(x, d);
    let mut trace: Vec<TraceStep> = Vec::new();

    let mut best_loss = model.loss(x, Label::Malware)?;
    let mut best = state.snapshot();
    let mut best_trace_len = 0;

    for _ in 0..iters {
        if budget.epsilon == 0 {
            break;
        }
        let current = state.sample(Label::Malware);
        let (_, grad) = model.loss_and_grad_input(&current, Label::Malware)?;
        let flat = grad.iter().all(|&g| g == 0.0);
        let direction: Vec<f64> = if flat {
            // Plateau fallback: push the margin g1 - g0 down.
            model.margin_grad_input(&current)?.iter().map(|g| -g).collect()
        } else {
            grad
        };

        let mut scored: Vec<(f64, u32)> = admissible_flips(&state, &model.space, policy)
            .into_iter()
            .filter_map(|i| {
                let score = if state.is_active(i) {
                    -direction[i as usize]
                } else {
                    direction[i as usize]
                };
                (score > 0.0).then_some((score, i))
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        let mut applied = false;
        for (_, i) in scored {
            let next_distance = state.distance() as isize + state.flip_delta(i);
            if next_distance as usize > budget.epsilon {
                continue;
            }
            let mv = if state.is_active(i) {
                Move::Remove { feature: i }
            } else {
                Move::Add { feature: i }
            };
            state.flip(i);
            applied = true;
            let loss = model.loss(&state.sample(Label::Malware), Label::Malware)?;
            trace.push(TraceStep { mv, value: loss });
            if loss > best_loss {
                best_loss = loss;
                best = state.snapshot();
                best_trace_len = trace.len();
            }
        }
        if !applied {
            break;
        }
    }

    state.restore(&best);
    trace.truncate(best_trace_len);
    let x_adv = state.sample(Label::Malware);
    let success = model.predict(&x_adv)?.label == Label::Benign;
    Ok(AttackOutcome {
        original: x.clone(),
        flips_used: state.distance(),
        x_adv,
        success,
        trace,
        queries_used: 0,
    })
}
