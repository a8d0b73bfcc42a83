//! Decision-based zero-knowledge attack.
//!
//! The attacker sees only prediction outputs through a [`PredictOracle`] —
//! gradients are unreachable by construction. It samples not-yet-accepted
//! transformations uniformly at random (seeded), tentatively applies one,
//! queries the oracle, and keeps the change iff the malware score margin
//! `g1 - g0` strictly decreases within the flip budget. A rejected candidate
//! is set aside until the next accepted step changes the working point, at
//! which time the whole non-accepted pool becomes eligible again. Terminates
//! on evasion, query exhaustion, or pool exhaustion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttackOutcome, Budget, FlipState, Move, PredictOracle, TraceStep, TransformationSet};
use crate::error::{Error, Result};
use crate::featurespace::{BinarySample, FeatureSpaceSpec, Label};

pub fn attack_query_zk<O: PredictOracle>(
    oracle: &O,
    space: &FeatureSpaceSpec,
    x: &BinarySample,
    ts: &TransformationSet,
    budget: &Budget,
    seed: u64,
) -> Result<AttackOutcome> {
    let Some(query_limit) = budget.query_limit else {
        return Err(Error::Config(
            "query-zk attack requires a query_limit".into(),
        ));
    };
    ts.validate_dimension(space.dimension)?;
    let initial = oracle.query(x)?;
    if initial.label != Label::Malware {
        return Err(Error::Precondition(
            "attack target must be predicted malware".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = FlipState::new(x, space.dimension);
    let mut trace: Vec<TraceStep> = Vec::new();
    let mut margin = initial.margin();
    let mut queries = 0usize;
    let mut accepted = vec![false; ts.len()];
    let mut pool: Vec<usize> = (0..ts.len()).collect();
    let mut success = false;

    'search: while !pool.is_empty() && queries < query_limit {
        let pick = rng.gen_range(0..pool.len());
        let idx = pool.swap_remove(pick);
        let t = ts.get(idx);
        let new_flips = state.new_flips(&t.adds);
        if new_flips == 0 || state.distance() + new_flips > budget.epsilon {
            // Inapplicable under the current point; no query spent.
            continue;
        }

        let snap = state.snapshot();
        let added = state.apply_adds(&t.adds);
        let candidate = state.sample(Label::Malware);
        queries += 1;
        let pred = oracle.query(&candidate)?;
        if pred.margin() < margin {
            margin = pred.margin();
            accepted[idx] = true;
            trace.push(TraceStep {
                mv: Move::Apply {
                    id: t.id.clone(),
                    added,
                },
                value: margin,
            });
            if pred.label == Label::Benign {
                success = true;
                break 'search;
            }
            // The working point moved: previously rejected candidates may
            // help now, so rebuild the pool from everything not accepted.
            pool = (0..ts.len()).filter(|&i| !accepted[i]).collect();
        } else {
            state.restore(&snap);
        }
    }

    let x_adv = state.sample(Label::Malware);
    Ok(AttackOutcome {
        original: x.clone(),
        flips_used: state.distance(),
        x_adv,
        success,
        trace,
        queries_used: queries,
    })
}
