use super::*;
use crate::featurespace::MutationPolicy;
use crate::models::ModelKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn space(d: usize) -> FeatureSpaceSpec {
    FeatureSpaceSpec::new(d).unwrap()
}

fn linear_with(w: Vec<f64>, b: f64) -> Model {
    let d = w.len();
    let mut params = w;
    params.push(b);
    Model {
        kind: ModelKind::LinearMargin,
        space: space(d),
        params,
    }
}

fn sample(active: Vec<u32>, d: usize) -> BinarySample {
    BinarySample::new(active, Label::Malware, d).unwrap()
}

/// Random linear model and a sample it predicts as malware.
fn random_tp_instance(d: usize, rng: &mut ChaCha8Rng) -> (Model, BinarySample) {
    loop {
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-0.5..0.5);
        let model = linear_with(w, b);
        let active: Vec<u32> = (0..d as u32).filter(|_| rng.gen::<f64>() < 0.4).collect();
        let x = sample(active, d);
        if model.predict(&x).unwrap().label == Label::Malware {
            return (model, x);
        }
    }
}

/// Replays a trace from the original sample; panics on an inconsistent move.
fn replay(original: &BinarySample, trace: &[TraceStep], d: usize) -> BinarySample {
    let mut dense = original.to_dense(d);
    for step in trace {
        match &step.mv {
            Move::Add { feature } => {
                assert!(!dense[*feature as usize], "add of active feature");
                dense[*feature as usize] = true;
            }
            Move::Remove { feature } => {
                assert!(dense[*feature as usize], "remove of inactive feature");
                dense[*feature as usize] = false;
            }
            Move::Apply { added, .. } => {
                for &f in added {
                    assert!(!dense[f as usize], "apply re-adds active feature");
                    dense[f as usize] = true;
                }
            }
        }
    }
    BinarySample::from_dense(&dense, original.label)
}

fn assert_sound(outcome: &AttackOutcome, original: &BinarySample, epsilon: usize, d: usize) {
    assert!(outcome.flips_used <= epsilon, "budget exceeded");
    assert_eq!(original.hamming(&outcome.x_adv), outcome.flips_used);
    let replayed = replay(original, &outcome.trace, d);
    assert_eq!(replayed.active, outcome.x_adv.active, "trace replay mismatch");
}

/// Exhaustive evasion check over the L0 ball reachable under the policy.
fn enumeration_evades(
    model: &Model,
    x: &BinarySample,
    epsilon: usize,
    policy: MutationPolicy,
) -> bool {
    let d = model.dimension();
    let candidates: Vec<u32> = (0..d as u32)
        .filter(|&i| {
            if x.is_active(i) {
                policy == MutationPolicy::FlipAny
            } else {
                model.space.addable[i as usize]
            }
        })
        .collect();
    let mut chosen = Vec::new();
    fn rec(
        model: &Model,
        x: &BinarySample,
        candidates: &[u32],
        start: usize,
        left: usize,
        chosen: &mut Vec<u32>,
    ) -> bool {
        if !chosen.is_empty() {
            let mut dense = x.to_dense(model.dimension());
            for &i in chosen.iter() {
                dense[i as usize] = !dense[i as usize];
            }
            let flipped = BinarySample::from_dense(&dense, x.label);
            if model.predict(&flipped).unwrap().label == Label::Benign {
                return true;
            }
        }
        if left == 0 {
            return false;
        }
        for pos in start..candidates.len() {
            chosen.push(candidates[pos]);
            if rec(model, x, candidates, pos + 1, left - 1, chosen) {
                return true;
            }
            chosen.pop();
        }
        false
    }
    rec(model, x, &candidates, 0, epsilon, &mut chosen)
}

#[test]
fn zero_budget_returns_input() {
    let model = linear_with(vec![0.5, -0.8, 0.2], 0.0);
    let x = sample(vec![0], 3);
    let out = attack_pgd_binary(&model, &x, &Budget::flips(0), 10, MutationPolicy::AddOnly).unwrap();
    assert_eq!(out.x_adv, x);
    assert!(!out.success);
    assert_eq!(out.flips_used, 0);
    assert!(out.trace.is_empty());
}

#[test]
fn attack_on_benign_prediction_is_precondition_error() {
    let model = linear_with(vec![-1.0, -1.0], 0.0);
    let x = sample(vec![0], 2);
    assert!(matches!(
        attack_pgd_binary(&model, &x, &Budget::flips(3), 10, MutationPolicy::AddOnly),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn pgd_single_flip_matches_exhaustive_single_adds() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..50 {
        let (model, x) = random_tp_instance(10, &mut rng);
        let out =
            attack_pgd_binary(&model, &x, &Budget::flips(1), 10, MutationPolicy::AddOnly).unwrap();
        // Brute force: the single add that minimizes the resulting margin.
        let mut best: Option<(f64, u32)> = None;
        for i in 0..10u32 {
            if x.is_active(i) {
                continue;
            }
            let mut active = x.active.clone();
            active.push(i);
            let flipped = BinarySample::new(active, Label::Malware, 10).unwrap();
            let m = model.predict(&flipped).unwrap().margin();
            if best.map_or(true, |(bm, _)| m < bm) {
                best = Some((m, i));
            }
        }
        let (best_margin, best_feature) = best.unwrap();
        let w = &model.params;
        if w[best_feature as usize] < 0.0 {
            assert_eq!(out.flips_used, 1);
            assert_eq!(out.flipped_features(), vec![best_feature]);
            assert!(
                (model.predict(&out.x_adv).unwrap().margin() - best_margin).abs() < 1e-12
            );
        } else {
            // No margin-reducing add exists; the attack must leave x alone.
            assert_eq!(out.flips_used, 0);
        }
    }
}

#[test]
fn pgd_does_not_stall_on_hinge_plateau() {
    // Margin 2 at the start: hinge loss 0, zero gradient. The margin
    // fallback must still find the evasion within budget.
    let model = linear_with(vec![2.0, -1.5, -1.5], 0.0);
    let x = sample(vec![0], 3);
    assert_eq!(model.loss(&x, Label::Malware).unwrap(), 0.0);
    let out = attack_pgd_binary(&model, &x, &Budget::flips(2), 10, MutationPolicy::AddOnly).unwrap();
    assert!(out.success, "plateau fallback failed to evade");
    assert_eq!(out.flipped_features(), vec![1, 2]);
}

#[test]
fn jsma_stalls_on_all_zero_gradient() {
    let model = linear_with(vec![2.0, -1.5, -1.5], 0.0);
    let x = sample(vec![0], 3);
    let out = attack_jsma_binary(&model, &x, &Budget::flips(3), MutationPolicy::AddOnly).unwrap();
    assert_eq!(out.x_adv, x);
    assert!(!out.success);
    assert_eq!(out.flips_used, 0);
}

#[test]
fn jsma_stops_at_first_evasion() {
    let model = linear_with(vec![0.4, -1.0, -0.9], 0.0);
    let x = sample(vec![0], 3); // margin 0.4, hinge active
    let out = attack_jsma_binary(&model, &x, &Budget::flips(50), MutationPolicy::AddOnly).unwrap();
    assert!(out.success);
    assert_eq!(out.flips_used, 1);
    assert_eq!(out.flipped_features(), vec![1]);
}

#[test]
fn jsma_flip_order_is_weight_magnitude_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        // Instances in the hinge-active region (margin < 1) so the gradient
        // is -w throughout.
        let (model, x) = loop {
            let (m, x) = random_tp_instance(9, &mut rng);
            let margin = m.predict(&x).unwrap().scores[1];
            if margin < 1.0 {
                break (m, x);
            }
        };
        let eps = 4;
        let out = attack_jsma_binary(&model, &x, &Budget::flips(eps), MutationPolicy::AddOnly).unwrap();

        let mut expected: Vec<u32> = (0..9u32)
            .filter(|&i| !x.is_active(i) && model.params[i as usize] < 0.0)
            .collect();
        expected.sort_by(|&a, &b| {
            model.params[a as usize]
                .partial_cmp(&model.params[b as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        // Trace order must equal the benign-pushing magnitude order,
        // truncated at evasion or budget.
        let got: Vec<u32> = out
            .trace
            .iter()
            .map(|s| match s.mv {
                Move::Add { feature } => feature,
                _ => panic!("unexpected move"),
            })
            .collect();
        assert_eq!(got[..], expected[..got.len().min(expected.len())]);
        assert!(got.len() <= eps);
    }
}

#[test]
fn greedy_pk_prefers_strong_transformation_and_matches_depth2_search() {
    // T1 adds a strongly benign feature, T2 a neutral one.
    let model = linear_with(vec![0.6, -1.2, -0.01, 0.0], 0.0);
    let x = sample(vec![0], 4);
    let ts = TransformationSet::new(vec![
        Transformation::new("t1", vec![1]).unwrap(),
        Transformation::new("t2", vec![2]).unwrap(),
    ])
    .unwrap();
    let out = attack_greedy_pk(&model, &x, &ts, &Budget::flips(2)).unwrap();
    assert!(out.success);
    match &out.trace[0].mv {
        Move::Apply { id, .. } => assert_eq!(id, "t1"),
        other => panic!("unexpected move {other:?}"),
    }

    // Exhaustive search over transformation sequences of length <= 2 finds
    // the same best final loss.
    let mut best_loss = f64::NEG_INFINITY;
    for seq in [
        vec![0usize],
        vec![1],
        vec![0, 1],
        vec![1, 0],
    ] {
        let mut dense = x.to_dense(4);
        let mut flips = 0;
        for &t in &seq {
            for &f in &ts.get(t).adds {
                if !dense[f as usize] {
                    dense[f as usize] = true;
                    flips += 1;
                }
            }
        }
        if flips <= 2 {
            let y = BinarySample::from_dense(&dense, Label::Malware);
            best_loss = best_loss.max(model.loss(&y, Label::Malware).unwrap());
        }
    }
    let got_loss = model.loss(&out.x_adv, Label::Malware).unwrap();
    assert!((got_loss - best_loss).abs() < 1e-12);
}

#[test]
fn greedy_pk_infeasible_budget_leaves_input() {
    let model = linear_with(vec![0.4, -1.0, -1.0, -1.0], 0.0);
    let x = sample(vec![0], 4);
    let ts = TransformationSet::new(vec![Transformation::new("big", vec![1, 2, 3]).unwrap()])
        .unwrap();
    let out = attack_greedy_pk(&model, &x, &ts, &Budget::flips(2)).unwrap();
    assert_eq!(out.x_adv, x);
    assert!(!out.success);
    assert_eq!(out.flips_used, 0);
}

#[test]
fn greedy_pk_skips_fully_overlapping_transformation() {
    let model = linear_with(vec![0.4, -1.0], 0.0);
    let x = sample(vec![0], 2);
    let ts = TransformationSet::new(vec![
        Transformation::new("noop", vec![0]).unwrap(),
        Transformation::new("useful", vec![1]).unwrap(),
    ])
    .unwrap();
    let out = attack_greedy_pk(&model, &x, &ts, &Budget::flips(2)).unwrap();
    assert!(out.success);
    assert_eq!(out.flips_used, 1);
    assert_eq!(out.trace.len(), 1);
}

#[test]
fn query_zk_requires_query_limit() {
    let model = linear_with(vec![0.4, -1.0], 0.0);
    let x = sample(vec![0], 2);
    let ts = TransformationSet::new(vec![Transformation::new("t", vec![1]).unwrap()]).unwrap();
    let err = attack_query_zk(
        &model,
        &space(2),
        &x,
        &ts,
        &Budget::flips(2),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn query_zk_respects_query_limit_and_margin_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..30 {
        let (model, x) = random_tp_instance(12, &mut rng);
        let ts = TransformationSet::new(
            (0..6)
                .map(|k| {
                    let adds: Vec<u32> = (0..12u32).filter(|_| rng.gen::<f64>() < 0.25).collect();
                    Transformation::new(format!("t{k}"), if adds.is_empty() { vec![k] } else { adds })
                        .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let limit = 8;
        let out = attack_query_zk(
            &model,
            &model.space,
            &x,
            &ts,
            &Budget::with_queries(4, limit),
            trial,
        )
        .unwrap();
        assert!(out.queries_used <= limit);
        assert_sound(&out, &x, 4, 12);
        // Margins recorded on accepted steps never increase.
        let margins: Vec<f64> = out.trace.iter().map(|s| s.value).collect();
        for w in margins.windows(2) {
            assert!(w[1] < w[0] + 1e-12);
        }
        // Realizability: every flipped feature comes from an applied
        // transformation.
        let applied_union: Vec<u32> = out
            .trace
            .iter()
            .flat_map(|s| match &s.mv {
                Move::Apply { added, .. } => added.clone(),
                _ => vec![],
            })
            .collect();
        for f in out.flipped_features() {
            assert!(applied_union.contains(&f));
        }
    }
}

#[test]
fn query_zk_finds_known_evader_within_one_pass() {
    // One transformation evades outright; with query_limit >= |ts| the
    // seeded sampler must always reach it, over 100 seeds.
    let model = linear_with(vec![0.4, -2.0, 0.1, 0.2, 0.05, 0.0], 0.0);
    let x = sample(vec![0], 6);
    let ts = TransformationSet::new(vec![
        Transformation::new("a", vec![2]).unwrap(),
        Transformation::new("b", vec![3]).unwrap(),
        Transformation::new("evader", vec![1]).unwrap(),
        Transformation::new("c", vec![4]).unwrap(),
        Transformation::new("d", vec![5]).unwrap(),
    ])
    .unwrap();
    let mut wins_full = 0;
    let mut wins_tiny = 0;
    for seed in 0..100 {
        let full = attack_query_zk(
            &model,
            &model.space,
            &x,
            &ts,
            &Budget::with_queries(3, ts.len()),
            seed,
        )
        .unwrap();
        if full.success {
            wins_full += 1;
        }
        let tiny = attack_query_zk(
            &model,
            &model.space,
            &x,
            &ts,
            &Budget::with_queries(3, 1),
            seed,
        )
        .unwrap();
        if tiny.success {
            wins_tiny += 1;
        }
    }
    assert_eq!(wins_full, 100);
    assert!(wins_tiny < 100);
}

#[test]
fn l0_soundness_across_attacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..60u64 {
        let (model, x) = random_tp_instance(14, &mut rng);
        let eps = (trial % 6) as usize;
        let policy = if trial % 2 == 0 {
            MutationPolicy::AddOnly
        } else {
            MutationPolicy::FlipAny
        };
        let pgd = attack_pgd_binary(&model, &x, &Budget::flips(eps), 5, policy).unwrap();
        assert_sound(&pgd, &x, eps, 14);
        let jsma = attack_jsma_binary(&model, &x, &Budget::flips(eps), policy).unwrap();
        assert_sound(&jsma, &x, eps, 14);
    }
}

#[test]
fn budget_monotonicity_on_linear_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let (model, x) = random_tp_instance(10, &mut rng);
        let mut prev_success = false;
        for eps in 0..6 {
            let out = attack_pgd_binary(&model, &x, &Budget::flips(eps), 10, MutationPolicy::AddOnly)
                .unwrap();
            if prev_success {
                assert!(out.success, "success lost when budget grew to {eps}");
            }
            prev_success = out.success;
        }
    }
}

#[test]
fn pgd_matches_enumeration_on_small_linear_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for trial in 0..40u64 {
        let (model, x) = random_tp_instance(10, &mut rng);
        let eps = 1 + (trial % 3) as usize;
        for policy in [MutationPolicy::AddOnly, MutationPolicy::FlipAny] {
            let out = attack_pgd_binary(&model, &x, &Budget::flips(eps), 10, policy).unwrap();
            let oracle = enumeration_evades(&model, &x, eps, policy);
            assert_eq!(
                out.success, oracle,
                "pgd {} but enumeration {} (eps {eps}, policy {policy:?})",
                out.success, oracle
            );
        }
    }
}

#[test]
fn transformation_file_round_trip() {
    let ts = TransformationSet::new(vec![
        Transformation::new("add_perm", vec![3, 7, 9]).unwrap(),
        Transformation::new("add_api", vec![1]).unwrap(),
    ])
    .unwrap();
    let file = tempfile::NamedTempFile::new().unwrap();
    write_transformations(&ts, file.path()).unwrap();
    let loaded = load_transformations(file.path(), 16).unwrap();
    assert_eq!(loaded, ts);

    // Out-of-range index must be rejected at load time.
    assert!(matches!(
        load_transformations(file.path(), 5),
        Err(Error::IndexRange { .. })
    ));
}

#[test]
fn duplicate_transformation_ids_rejected() {
    let r = TransformationSet::new(vec![
        Transformation::new("same", vec![1]).unwrap(),
        Transformation::new("same", vec![2]).unwrap(),
    ]);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn addable_flags_constrain_pgd() {
    let sp = space(3)
        .with_addable(vec![true, false, true])
        .unwrap();
    let model = Model {
        kind: ModelKind::LinearMargin,
        space: sp,
        params: vec![0.4, -2.0, -0.1, 0.0],
    };
    let x = sample(vec![0], 3);
    // Feature 1 would be the best flip but is not addable.
    let out = attack_pgd_binary(&model, &x, &Budget::flips(1), 10, MutationPolicy::AddOnly).unwrap();
    assert_eq!(out.flipped_features(), vec![2]);
}
