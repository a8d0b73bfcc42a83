//! Clean metrics, robust accuracy, robustness gained by hardening, and
//! adversarial-example confidence.
//!
//! Malware is the positive class everywhere. Robust accuracy is the share of
//! attacked true positives still predicted malware, in percent.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackOutcome, AttackSpec};
use crate::error::{Error, Result};
use crate::featurespace::{Dataset, Label};
use crate::models::Model;
use crate::util::mix_seed;

/// Confusion-matrix metrics; the raw counts are kept so every ratio can be
/// re-derived from the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl CleanReport {
    /// Zero denominators yield 0 for precision, recall, and F1.
    pub fn from_confusion(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let total = tp + fp + fn_ + tn;
        let accuracy = if total > 0 {
            (tp + tn) as f64 / total as f64
        } else {
            0.0
        };
        CleanReport {
            precision,
            recall,
            f1,
            accuracy,
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

pub fn clean_eval(model: &Model, test: &Dataset) -> Result<CleanReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for s in &test.samples {
        let pred = model.predict(s)?.label;
        match (s.label, pred) {
            (Label::Malware, Label::Malware) => tp += 1,
            (Label::Benign, Label::Malware) => fp += 1,
            (Label::Malware, Label::Benign) => fn_ += 1,
            (Label::Benign, Label::Benign) => tn += 1,
        }
    }
    Ok(CleanReport::from_confusion(tp, fp, fn_, tn))
}

/// Robust accuracy of one model against one attack at one bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub attack: String,
    pub epsilon: usize,
    /// Percentage of attacked true positives still detected.
    pub robust_accuracy: f64,
    /// Samples actually evaluated.
    pub n_eval: usize,
    /// How many requested evaluation samples were unavailable.
    pub shortfall: usize,
    pub seed: u64,
}

/// Default evaluation size when unspecified: up to 1000 true positives.
pub const DEFAULT_N_EVAL: usize = 1000;

pub fn robust_eval(
    model: &Model,
    attack: &AttackSpec,
    epsilon: usize,
    test: &Dataset,
    n_eval: Option<usize>,
    seed: u64,
) -> Result<RobustReport> {
    robust_eval_with_outcomes(model, attack, epsilon, test, n_eval, seed).map(|(r, _)| r)
}

/// Like [`robust_eval`] but also returns the attack outcomes so callers can
/// feed traces into the analysis tools.
pub fn robust_eval_with_outcomes(
    model: &Model,
    attack: &AttackSpec,
    epsilon: usize,
    test: &Dataset,
    n_eval: Option<usize>,
    seed: u64,
) -> Result<(RobustReport, Vec<AttackOutcome>)> {
    let mut true_positives: Vec<usize> = Vec::new();
    for (i, s) in test.samples.iter().enumerate() {
        if s.label == Label::Malware && model.predict(s)?.label == Label::Malware {
            true_positives.push(i);
        }
    }
    if true_positives.is_empty() {
        return Err(Error::Evaluation(
            "no true-positive malware available for robust evaluation".into(),
        ));
    }
    let requested = n_eval.unwrap_or_else(|| DEFAULT_N_EVAL.min(true_positives.len()));
    let shortfall = requested.saturating_sub(true_positives.len());
    let take = requested.min(true_positives.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    true_positives.shuffle(&mut rng);
    let mut chosen = true_positives[..take].to_vec();
    chosen.sort_unstable();

    let outcomes: Vec<AttackOutcome> = chosen
        .par_iter()
        .enumerate()
        .map(|(k, &idx)| {
            run_attack(
                model,
                &test.samples[idx],
                attack,
                epsilon,
                mix_seed(seed, 4, k as u64),
            )
        })
        .collect::<Result<_>>()?;

    let evaded = outcomes.iter().filter(|o| o.success).count();
    let robust_accuracy = 100.0 * (take - evaded) as f64 / take as f64;
    Ok((
        RobustReport {
            attack: attack.name().to_string(),
            epsilon,
            robust_accuracy,
            n_eval: take,
            shortfall,
            seed,
        },
        outcomes,
    ))
}

/// Robustness attributable to hardening: the absolute gain over the vanilla
/// baseline and that gain normalized by the baseline's remaining headroom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRobustness {
    pub r_at: f64,
    pub r_rel: f64,
}

/// `r_at = r_h - r_v`, `r_rel = r_at / (100 - r_v) * 100`. Undefined when the
/// baseline is already fully robust (`r_v = 100`).
pub fn relative_robustness(r_v: f64, r_h: f64) -> Result<RelativeRobustness> {
    for (name, v) in [("r_v", r_v), ("r_h", r_h)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Evaluation(format!(
                "{name} = {v} outside [0, 100]"
            )));
        }
    }
    if r_v >= 100.0 {
        return Err(Error::Evaluation(
            "relative robustness undefined: vanilla robust accuracy is 100".into(),
        ));
    }
    let r_at = r_h - r_v;
    let r_rel = r_at / (100.0 - r_v) * 100.0;
    Ok(RelativeRobustness { r_at, r_rel })
}

/// Loss of each adversarial example under the true (malware) label, plus
/// summary statistics. A larger loss means the example is misclassified with
/// greater confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSummary {
    pub losses: Vec<f64>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

pub fn ae_confidence(model: &Model, outcomes: &[AttackOutcome]) -> Result<ConfidenceSummary> {
    let mut losses = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        losses.push(model.loss(&o.x_adv, Label::Malware)?);
    }
    let mean = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    let max = losses.iter().copied().fold(None, |acc: Option<f64>, l| {
        Some(acc.map_or(l, |a| a.max(l)))
    });
    Ok(ConfidenceSummary { losses, mean, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Budget;
    use crate::featurespace::{BinarySample, FeatureSpaceSpec, MutationPolicy};
    use crate::models::ModelKind;
    use rand::Rng;

    fn linear_with(w: Vec<f64>, b: f64) -> Model {
        let d = w.len();
        let mut params = w;
        params.push(b);
        Model {
            kind: ModelKind::LinearMargin,
            space: FeatureSpaceSpec::new(d).unwrap(),
            params,
        }
    }

    fn dataset_from(samples: Vec<BinarySample>, d: usize) -> Dataset {
        Dataset::new(FeatureSpaceSpec::new(d).unwrap(), samples).unwrap()
    }

    #[test]
    fn confusion_formula_examples() {
        let r = CleanReport::from_confusion(2, 1, 1, 6);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.accuracy - 0.8).abs() < 1e-15);

        let perfect = CleanReport::from_confusion(5, 0, 0, 5);
        assert_eq!(perfect.f1, 1.0);

        // Zero predicted positives: precision defined as 0, hence F1 = 0.
        let none = CleanReport::from_confusion(0, 0, 4, 6);
        assert_eq!(none.precision, 0.0);
        assert_eq!(none.f1, 0.0);
    }

    #[test]
    fn clean_eval_counts_match_formula_fields() {
        let model = linear_with(vec![1.0, -1.0], -0.5);
        let samples = vec![
            BinarySample::new(vec![0], Label::Malware, 2).unwrap(), // margin 0.5 -> TP
            BinarySample::new(vec![1], Label::Malware, 2).unwrap(), // margin -1.5 -> FN
            BinarySample::new(vec![0], Label::Benign, 2).unwrap(),  // FP
            BinarySample::new(vec![], Label::Benign, 2).unwrap(),   // TN
        ];
        let report = clean_eval(&model, &dataset_from(samples, 2)).unwrap();
        assert_eq!((report.tp, report.fp, report.fn_, report.tn), (1, 1, 1, 1));
        let recomputed = CleanReport::from_confusion(report.tp, report.fp, report.fn_, report.tn);
        assert_eq!(report, recomputed);
    }

    #[test]
    fn zero_epsilon_gives_full_robust_accuracy() {
        let model = linear_with(vec![0.5, -1.0], 0.0);
        let samples = vec![
            BinarySample::new(vec![0], Label::Malware, 2).unwrap(),
            BinarySample::new(vec![0], Label::Malware, 2).unwrap(),
        ];
        let ds = dataset_from(samples, 2);
        let report =
            robust_eval(&model, &AttackSpec::pgd_default(), 0, &ds, None, 3).unwrap();
        assert_eq!(report.robust_accuracy, 100.0);
        assert_eq!(report.n_eval, 2);
    }

    #[test]
    fn constant_malware_classifier_is_unattackable() {
        let model = linear_with(vec![0.0, 0.0, 0.0], 1.0);
        let samples = vec![
            BinarySample::new(vec![0], Label::Malware, 3).unwrap(),
            BinarySample::new(vec![1, 2], Label::Malware, 3).unwrap(),
        ];
        let ds = dataset_from(samples, 3);
        for spec in [AttackSpec::pgd_default(), AttackSpec::Jsma] {
            let report = robust_eval(&model, &spec, 3, &ds, None, 1).unwrap();
            assert_eq!(report.robust_accuracy, 100.0);
        }
    }

    #[test]
    fn zero_true_positives_is_error() {
        let model = linear_with(vec![-1.0], 0.0);
        let samples = vec![BinarySample::new(vec![0], Label::Malware, 1).unwrap()];
        let ds = dataset_from(samples, 1);
        assert!(matches!(
            robust_eval(&model, &AttackSpec::Jsma, 1, &ds, None, 0),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn shortfall_recorded_when_requesting_more_than_available() {
        let model = linear_with(vec![0.5, -1.0], 0.0);
        let samples = vec![
            BinarySample::new(vec![0], Label::Malware, 2).unwrap(),
            BinarySample::new(vec![0], Label::Malware, 2).unwrap(),
        ];
        let ds = dataset_from(samples, 2);
        let report = robust_eval(&model, &AttackSpec::Jsma, 1, &ds, Some(5), 0).unwrap();
        assert_eq!(report.n_eval, 2);
        assert_eq!(report.shortfall, 3);
    }

    /// Brute-force robust accuracy by enumerating the add-only L0 ball.
    fn enumeration_robust_accuracy(model: &Model, ds: &Dataset, epsilon: usize) -> f64 {
        let d = model.dimension();
        let mut robust = 0usize;
        let mut total = 0usize;
        for s in &ds.samples {
            if s.label != Label::Malware || model.predict(s).unwrap().label != Label::Malware {
                continue;
            }
            total += 1;
            let candidates: Vec<u32> = (0..d as u32).filter(|&i| !s.is_active(i)).collect();
            let mut evaded = false;
            let mut stack: Vec<(usize, Vec<u32>)> = vec![(0, vec![])];
            while let Some((start, chosen)) = stack.pop() {
                if !chosen.is_empty() {
                    let mut active = s.active.clone();
                    active.extend_from_slice(&chosen);
                    let flipped = BinarySample::new(active, Label::Malware, d).unwrap();
                    if model.predict(&flipped).unwrap().label == Label::Benign {
                        evaded = true;
                        break;
                    }
                }
                if chosen.len() < epsilon {
                    for pos in start..candidates.len() {
                        let mut next = chosen.clone();
                        next.push(candidates[pos]);
                        stack.push((pos + 1, next));
                    }
                }
            }
            if !evaded {
                robust += 1;
            }
        }
        100.0 * robust as f64 / total as f64
    }

    #[test]
    fn robust_eval_matches_enumeration_on_small_linear_models() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for trial in 0..10u64 {
            let d = 9;
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let model = linear_with(w, rng.gen_range(-0.2..0.6));
            let samples: Vec<BinarySample> = (0..25)
                .map(|_| {
                    let active = (0..d as u32).filter(|_| rng.gen::<f64>() < 0.4).collect();
                    BinarySample::new(active, Label::Malware, d).unwrap()
                })
                .collect();
            let ds = dataset_from(samples, d);
            if ds
                .samples
                .iter()
                .all(|s| model.predict(s).unwrap().label == Label::Benign)
            {
                continue;
            }
            let eps = 1 + (trial % 3) as usize;
            let report = robust_eval(
                &model,
                &AttackSpec::Pgd { iters: 10 },
                eps,
                &ds,
                None,
                trial,
            )
            .unwrap();
            let expected = enumeration_robust_accuracy(&model, &ds, eps);
            assert!(
                (report.robust_accuracy - expected).abs() < 1e-9,
                "attack {} vs enumeration {expected}",
                report.robust_accuracy
            );
        }
    }

    #[test]
    fn robust_eval_is_deterministic() {
        let model = linear_with(vec![0.4, -0.8, -0.3, 0.2], 0.0);
        let samples: Vec<BinarySample> = (0..8)
            .map(|i| BinarySample::new(vec![(i % 2) as u32, 3], Label::Malware, 4).unwrap())
            .collect();
        let ds = dataset_from(samples, 4);
        let a = robust_eval(&model, &AttackSpec::Jsma, 2, &ds, Some(4), 7).unwrap();
        let b = robust_eval(&model, &AttackSpec::Jsma, 2, &ds, Some(4), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn relative_robustness_formulas() {
        let r = relative_robustness(40.0, 70.0).unwrap();
        assert_eq!(r.r_at, 30.0);
        assert_eq!(r.r_rel, 50.0);

        let flat = relative_robustness(55.0, 55.0).unwrap();
        assert_eq!(flat.r_at, 0.0);
        assert_eq!(flat.r_rel, 0.0);

        assert!(matches!(
            relative_robustness(100.0, 100.0),
            Err(Error::Evaluation(_))
        ));
        assert!(matches!(
            relative_robustness(-1.0, 50.0),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn relative_robustness_is_capped_at_100() {
        for rv in 0..100 {
            for rh in 0..=100 {
                let r = relative_robustness(rv as f64, rh as f64).unwrap();
                assert!(r.r_rel <= 100.0 + 1e-12);
                if rh == 100 {
                    assert!((r.r_rel - 100.0).abs() < 1e-12);
                } else {
                    assert!(r.r_rel < 100.0);
                }
            }
        }
    }

    #[test]
    fn negative_gain_is_reported_not_clipped() {
        let r = relative_robustness(60.0, 45.0).unwrap();
        assert_eq!(r.r_at, -15.0);
        assert!(r.r_rel < 0.0);
    }

    #[test]
    fn confidence_of_known_probability_is_closed_form() {
        // Zero weights, output biases chosen so that the malware probability
        // is exactly 0.9: b1 - b0 = ln 9.
        let kind = ModelKind::Mlp { hidden: [4, 3] };
        let space = FeatureSpaceSpec::new(5).unwrap();
        let mut model = Model::init(kind.clone(), space, 0).unwrap();
        model.params.iter_mut().for_each(|p| *p = 0.0);
        let count = model.params.len();
        model.params[count - 1] = 9.0_f64.ln(); // b3[1]
        let x = BinarySample::new(vec![1, 2], Label::Malware, 5).unwrap();
        let loss = model.loss(&x, Label::Malware).unwrap();
        assert!((loss - (-(0.9_f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn successful_ae_confidence_exceeds_ln2() {
        use crate::attacks::attack_jsma_binary;
        let mut model = Model::init(
            ModelKind::Mlp { hidden: [6, 5] },
            FeatureSpaceSpec::new(8).unwrap(),
            3,
        )
        .unwrap();
        model.params.iter_mut().for_each(|p| *p *= 4.0);
        let mut outcomes = Vec::new();
        for bits in 0u32..64 {
            let active: Vec<u32> = (0..8).filter(|i| bits & (1 << i) != 0).collect();
            let x = BinarySample::new(active, Label::Malware, 8).unwrap();
            if model.predict(&x).unwrap().label != Label::Malware {
                continue;
            }
            let out =
                attack_jsma_binary(&model, &x, &Budget::flips(4), MutationPolicy::AddOnly).unwrap();
            if out.success {
                outcomes.push(out);
            }
        }
        assert!(!outcomes.is_empty());
        let summary = ae_confidence(&model, &outcomes).unwrap();
        for l in &summary.losses {
            assert!(*l >= std::f64::consts::LN_2 * (1.0 - 1e-12));
        }
        assert!(summary.mean.unwrap() >= std::f64::consts::LN_2 * (1.0 - 1e-12));
    }

    #[test]
    fn empty_confidence_summary() {
        let model = linear_with(vec![1.0], 0.0);
        let summary = ae_confidence(&model, &[]).unwrap();
        assert!(summary.losses.is_empty());
        assert!(summary.mean.is_none());
        assert!(summary.max.is_none());
    }
}
