//! Greedy perfect-knowledge attack over a realizable transformation set.
//!
//! Repeatedly applies the transformation maximizing loss increase per newly
//! flipped feature, skipping candidates whose new flips would exceed the
//! remaining budget. Features already active cost nothing; a transformation
//! whose adds are fully active makes no progress and is skipped, which also
//! rules out infinite loops. Stops on evasion, budget exhaustion, or when no
//! candidate improves the loss.

use super::{
    require_true_positive, AttackOutcome, Budget, FlipState, Move, TraceStep, TransformationSet,
};
use crate::error::{Error, Result};
use crate::featurespace::{BinarySample, Label};
use crate::models::Model;

pub fn attack_greedy_pk(
    model: &Model,
    x: &BinarySample,
    ts: &TransformationSet,
    budget: &Budget,
) -> Result<AttackOutcome> {
    require_true_positive(model, x)?;
    if ts.is_empty() {
        return Err(Error::Precondition("transformation set is empty".into()));
    }
    ts.validate_dimension(model.dimension())?;

    let d = model.dimension();
    let mut state = FlipState::new(x, d);
    let mut trace: Vec<TraceStep> = Vec::new();
    let mut current_loss = model.loss(x, Label::Malware)?;
    let mut success = false;

    loop {
        let snap = state.snapshot();
        let mut best: Option<(f64, usize)> = None; // (gain per flip, ts index)
        for (idx, t) in ts.iter().enumerate() {
            let new_flips = state.new_flips(&t.adds);
            if new_flips == 0 || state.distance() + new_flips > budget.epsilon {
                continue;
            }
            state.apply_adds(&t.adds);
            let loss = model.loss(&state.sample(Label::Malware), Label::Malware)?;
            state.restore(&snap);
            let gain = loss - current_loss;
            if gain > 0.0 {
                let ratio = gain / new_flips as f64;
                if best.map_or(true, |(r, _)| ratio > r) {
                    best = Some((ratio, idx));
                }
            }
        }
        let Some((_, idx)) = best else { break };

        let t = ts.get(idx);
        let added = state.apply_adds(&t.adds);
        let stepped = state.sample(Label::Malware);
        current_loss = model.loss(&stepped, Label::Malware)?;
        trace.push(TraceStep {
            mv: Move::Apply {
                id: t.id.clone(),
                added,
            },
            value: current_loss,
        });
        if model.predict(&stepped)?.label == Label::Benign {
            success = true;
            break;
        }
    }

    let x_adv = state.sample(Label::Malware);
    Ok(AttackOutcome {
        original: x.clone(),
        flips_used: state.distance(),
        x_adv,
        success,
        trace,
        queries_used: 0,
    })
}
