//! Saliency-greedy attack: one flip per step.
//!
//! Each step recomputes the input gradient and flips the single admissible
//! feature with the largest positive loss-increase score. The attack stops at
//! the first evasion, on budget exhaustion, or when no flip has positive
//! score (in particular on an all-zero gradient at the hinge flat region —
//! unlike the multi-flip attack there is no fallback direction here).

use super::{
    admissible_flips, require_true_positive, AttackOutcome, Budget, FlipState, Move, TraceStep,
};
use crate::error::Result;
use crate::featurespace::{BinarySample, Label, MutationPolicy};
use crate::models::Model;

pub fn attack_jsma_binary(
    model: &Model,
    x: &BinarySample,
    budget: &Budget,
    policy: MutationPolicy,
) -> Result<AttackOutcome> {
    require_true_positive(model, x)?;
    let d = model.dimension();
    let mut state = FlipState::new(x, d);
    let mut trace: Vec<TraceStep> = Vec::new();

    let mut best_loss = model.loss(x, Label::Malware)?;
    let mut best = state.snapshot();
    let mut best_trace_len = 0;
    let mut evaded = false;

    loop {
        let current = state.sample(Label::Malware);
        let (_, grad) = model.loss_and_grad_input(&current, Label::Malware)?;

        let mut best_flip: Option<(f64, u32)> = None;
        for i in admissible_flips(&state, &model.space, policy) {
            let next_distance = state.distance() as isize + state.flip_delta(i);
            if next_distance as usize > budget.epsilon {
                continue;
            }
            let score = if state.is_active(i) {
                -grad[i as usize]
            } else {
                grad[i as usize]
            };
            if score > 0.0 && best_flip.map_or(true, |(s, _)| score > s) {
                best_flip = Some((score, i));
            }
        }
        let Some((_, i)) = best_flip else { break };

        let mv = if state.is_active(i) {
            Move::Remove { feature: i }
        } else {
            Move::Add { feature: i }
        };
        state.flip(i);
        let stepped = state.sample(Label::Malware);
        let loss = model.loss(&stepped, Label::Malware)?;
        trace.push(TraceStep { mv, value: loss });
        if loss > best_loss {
            best_loss = loss;
            best = state.snapshot();
            best_trace_len = trace.len();
        }
        if model.predict(&stepped)?.label == Label::Benign {
            // The evading iterate is also the loss maximum seen so far.
            best = state.snapshot();
            best_trace_len = trace.len();
            evaded = true;
            break;
        }
    }

    state.restore(&best);
    trace.truncate(best_trace_len);
    let x_adv = state.sample(Label::Malware);
    let success = evaded || model.predict(&x_adv)?.label == Label::Benign;
    Ok(AttackOutcome {
        original: x.clone(),
        flips_used: state.distance(),
        x_adv,
        success,
        trace,
        queries_used: 0,
    })
}
