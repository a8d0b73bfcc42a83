//! Two-class discriminants over binary inputs.
//!
//! Three model kinds share one flat parameter vector representation and a
//! common contract: a pair of scores `(g0, g1)` whose argmax is the label
//! (exact ties resolve to benign), a per-sample loss, and analytic gradients
//! with respect to both the input (treated as a real vector evaluated at the
//! binary point) and the parameters.
//!
//! * `linear-margin` — single-layer network trained with hinge loss plus L2,
//!   scores `(-m, m)` for margin `m = w.x + b`.
//! * `mlp` — two rectifier hidden layers, two output logits, cross-entropy.
//! * `soft-tree` — complete binary tree of sigmoid-gated inner nodes and
//!   softmax leaf distributions; the classification loss is the cross-entropy
//!   of the leaf mixture, and training adds a routing-balance penalty that is
//!   deliberately absent from the attack-facing loss.

mod linear;
mod mlp;
mod soft_tree;

pub(crate) use soft_tree::penalty_and_grad as soft_tree_penalty_and_grad;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurespace::{BinarySample, Dataset, FeatureSpaceSpec, Label};

/// Which discriminant a model instance uses, with its shape hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    LinearMargin,
    Mlp { hidden: [usize; 2] },
    SoftTree { max_depth: usize, lambda: f64 },
}

impl ModelKind {
    /// Two hidden layers of width 200.
    pub fn mlp_default() -> Self {
        ModelKind::Mlp { hidden: [200, 200] }
    }

    /// Depth-5 tree with routing-balance weight 0.47.
    pub fn soft_tree_default() -> Self {
        ModelKind::SoftTree {
            max_depth: 5,
            lambda: 0.47,
        }
    }

    /// Total number of parameters for dimension `d`.
    pub fn param_count(&self, d: usize) -> usize {
        match self {
            ModelKind::LinearMargin => linear::param_count(d),
            ModelKind::Mlp { hidden } => mlp::param_count(d, *hidden),
            ModelKind::SoftTree { max_depth, .. } => soft_tree::param_count(d, *max_depth),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ModelKind::LinearMargin => Ok(()),
            ModelKind::Mlp { hidden } => {
                if hidden[0] == 0 || hidden[1] == 0 {
                    Err(Error::Config("mlp hidden widths must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
            ModelKind::SoftTree { max_depth, lambda } => {
                if *max_depth == 0 {
                    Err(Error::Config("soft tree depth must be >= 1".into()))
                } else if !lambda.is_finite() || *lambda < 0.0 {
                    Err(Error::Config("soft tree lambda must be >= 0".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Label plus the raw score pair it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub scores: [f64; 2],
}

impl Prediction {
    /// Malware score margin `g1 - g0`; positive means predicted malware.
    pub fn margin(&self) -> f64 {
        self.scores[1] - self.scores[0]
    }
}

/// A trained (or freshly initialized) discriminant over one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub space: FeatureSpaceSpec,
    pub params: Vec<f64>,
}

impl Model {
    /// Initializes parameters uniformly in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
    /// per layer, drawn deterministically from `seed`.
    pub fn init(kind: ModelKind, space: FeatureSpaceSpec, seed: u64) -> Result<Self> {
        kind.validate()?;
        let d = space.dimension;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let params = match &kind {
            ModelKind::LinearMargin => linear::init(d, &mut rng),
            ModelKind::Mlp { hidden } => mlp::init(d, *hidden, &mut rng),
            ModelKind::SoftTree { max_depth, .. } => soft_tree::init(d, *max_depth, &mut rng),
        };
        Ok(Model {
            kind,
            space,
            params,
        })
    }

    pub fn dimension(&self) -> usize {
        self.space.dimension
    }

    fn check_sample(&self, x: &BinarySample) -> Result<()> {
        if let Some(&last) = x.active.last() {
            if last as usize >= self.dimension() {
                return Err(Error::IndexRange {
                    index: last,
                    dim: self.dimension(),
                });
            }
        }
        Ok(())
    }

    /// Raw score pair `(g0, g1)`.
    pub fn scores(&self, x: &BinarySample) -> Result<[f64; 2]> {
        self.check_sample(x)?;
        let d = self.dimension();
        let s = match &self.kind {
            ModelKind::LinearMargin => linear::scores(&self.params, d, &x.active),
            ModelKind::Mlp { hidden } => mlp::scores(&self.params, d, *hidden, &x.active),
            ModelKind::SoftTree { max_depth, .. } => {
                soft_tree::scores(&self.params, d, *max_depth, &x.active)
            }
        };
        if !s[0].is_finite() || !s[1].is_finite() {
            return Err(Error::Numeric(format!("non-finite scores {s:?}")));
        }
        Ok(s)
    }

    /// Scores over a continuous relaxation of the input. Agrees exactly with
    /// [`Model::scores`] at binary points; used by finite-difference oracles.
    pub fn scores_dense(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.dimension() {
            return Err(Error::Dimension(format!(
                "input length {} != dimension {}",
                x.len(),
                self.dimension()
            )));
        }
        let d = self.dimension();
        let s = match &self.kind {
            ModelKind::LinearMargin => linear::scores_dense(&self.params, d, x),
            ModelKind::Mlp { hidden } => mlp::scores_dense(&self.params, d, *hidden, x),
            ModelKind::SoftTree { max_depth, .. } => {
                soft_tree::scores_dense(&self.params, d, *max_depth, x)
            }
        };
        if !s[0].is_finite() || !s[1].is_finite() {
            return Err(Error::Numeric(format!("non-finite scores {s:?}")));
        }
        Ok(s)
    }

    /// Predicted label: argmax of the scores, exact tie resolving to benign.
    pub fn predict(&self, x: &BinarySample) -> Result<Prediction> {
        let scores = self.scores(x)?;
        let label = if scores[1] > scores[0] {
            Label::Malware
        } else {
            Label::Benign
        };
        Ok(Prediction { label, scores })
    }

    /// Per-sample classification loss: hinge with margin 1 for linear-margin,
    /// class cross-entropy for mlp and soft-tree.
    pub fn loss(&self, x: &BinarySample, y: Label) -> Result<f64> {
        self.check_sample(x)?;
        let d = self.dimension();
        let l = match &self.kind {
            ModelKind::LinearMargin => linear::loss(&self.params, d, &x.active, y),
            ModelKind::Mlp { hidden } => mlp::loss(&self.params, d, *hidden, &x.active, y),
            ModelKind::SoftTree { max_depth, .. } => {
                soft_tree::loss(&self.params, d, *max_depth, &x.active, y)
            }
        };
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {l}")));
        }
        Ok(l)
    }

    /// Loss at a continuous-relaxation input.
    pub fn loss_dense(&self, x: &[f64], y: Label) -> Result<f64> {
        let scores = self.scores_dense(x)?;
        let d = self.dimension();
        let l = match &self.kind {
            ModelKind::LinearMargin => linear::loss_from_scores(scores, y),
            ModelKind::Mlp { hidden } => {
                let _ = hidden;
                mlp::loss_from_scores(scores, y)
            }
            ModelKind::SoftTree { max_depth, .. } => {
                let _ = (max_depth, d);
                soft_tree::loss_from_scores(scores, y)
            }
        };
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {l}")));
        }
        Ok(l)
    }

    /// Loss and its gradient with respect to the input, evaluated at the
    /// binary point. The returned vector has length `d`.
    pub fn loss_and_grad_input(&self, x: &BinarySample, y: Label) -> Result<(f64, Vec<f64>)> {
        self.check_sample(x)?;
        let d = self.dimension();
        let (l, g) = match &self.kind {
            ModelKind::LinearMargin => linear::loss_and_grad_input(&self.params, d, &x.active, y),
            ModelKind::Mlp { hidden } => {
                mlp::loss_and_grad_input(&self.params, d, *hidden, &x.active, y)
            }
            ModelKind::SoftTree { max_depth, .. } => {
                soft_tree::loss_and_grad_input(&self.params, d, *max_depth, &x.active, y)
            }
        };
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {l}")));
        }
        Ok((l, g))
    }

    /// Loss and its gradient with respect to the parameters (classification
    /// loss only; the soft tree's routing penalty is handled at batch level
    /// during training).
    pub fn loss_and_grad_params(&self, x: &BinarySample, y: Label) -> Result<(f64, Vec<f64>)> {
        self.check_sample(x)?;
        let d = self.dimension();
        let (l, g) = match &self.kind {
            ModelKind::LinearMargin => linear::loss_and_grad_params(&self.params, d, &x.active, y),
            ModelKind::Mlp { hidden } => {
                mlp::loss_and_grad_params(&self.params, d, *hidden, &x.active, y)
            }
            ModelKind::SoftTree { max_depth, .. } => {
                soft_tree::loss_and_grad_params(&self.params, d, *max_depth, &x.active, y)
            }
        };
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {l}")));
        }
        Ok((l, g))
    }

    /// Gradient of the malware score margin `g1 - g0` with respect to the
    /// input. Attacks use this as a descent direction where the loss gradient
    /// vanishes (the hinge plateau of a confidently-correct linear model).
    pub fn margin_grad_input(&self, x: &BinarySample) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        let d = self.dimension();
        Ok(match &self.kind {
            ModelKind::LinearMargin => linear::margin_grad_input(&self.params, d),
            ModelKind::Mlp { hidden } => mlp::margin_grad_input(&self.params, d, *hidden, &x.active),
            ModelKind::SoftTree { max_depth, .. } => {
                soft_tree::margin_grad_input(&self.params, d, *max_depth, &x.active)
            }
        })
    }

    /// Index ranges of parameters subject to weight decay (layer weights;
    /// biases and leaf distributions are exempt).
    pub(crate) fn decay_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let d = self.dimension();
        match &self.kind {
            ModelKind::LinearMargin => linear::decay_ranges(d),
            ModelKind::Mlp { hidden } => mlp::decay_ranges(d, *hidden),
            ModelKind::SoftTree { max_depth, .. } => soft_tree::decay_ranges(d, *max_depth),
        }
    }
}

/// Optimizer settings for standard and adversarial training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Hinge regularization constant; the linear model's effective weight
    /// decay is `1 / (margin_c * n_train)`.
    pub margin_c: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 32,
            weight_decay: 1e-4,
            momentum: 0.9,
            margin_c: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Soft-tree tuning that pairs with [`ModelKind::soft_tree_default`].
    pub fn soft_tree_defaults() -> Self {
        TrainConfig {
            learning_rate: 0.12,
            momentum: 0.53,
            weight_decay: 5e-4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if !(self.margin_c > 0.0) {
            return Err(Error::Config("margin_c must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
}

/// Standard mini-batch training with momentum and weight decay. Returns the
/// parameters from the epoch with the best validation F1 (ties keep the
/// earliest; with an empty validation set the final epoch wins).
pub fn fit_standard(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    train_loop(model, train, val, cfg, |_, _| Ok(None))
}

/// Shared training loop. `epoch_data` may substitute the epoch's sample set
/// (same length as the base set); adversarial training uses this to swap in
/// freshly generated adversarial examples. With the hook returning `None`
/// this is exactly `fit_standard`, bit for bit.
pub(crate) fn train_loop<F>(
    init: &Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut epoch_data: F,
) -> Result<(Model, TrainLog)>
where
    F: FnMut(&Model, usize) -> Result<Option<Vec<BinarySample>>>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.space.dimension != init.dimension() {
        return Err(Error::Dimension(format!(
            "dataset dimension {} != model dimension {}",
            train.space.dimension,
            init.dimension()
        )));
    }

    let mut model = init.clone();
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }

    let n = train.len();
    let decay = match model.kind {
        ModelKind::LinearMargin => 1.0 / (cfg.margin_c * n as f64),
        _ => cfg.weight_decay,
    };
    let decay_ranges = model.decay_ranges();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut velocity = vec![0.0; model.params.len()];
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_params: Option<(usize, Vec<f64>)> = None;

    for epoch in 0..cfg.epochs {
        let epoch_start = std::time::Instant::now();
        let replaced = epoch_data(&model, epoch)?;
        if let Some(r) = &replaced {
            if r.len() != n {
                return Err(Error::Dimension(format!(
                    "epoch data has {} samples, expected {n}",
                    r.len()
                )));
            }
        }
        let samples: &[BinarySample] = match &replaced {
            Some(r) => r,
            None => &train.samples,
        };

        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; model.params.len()];
            for &i in batch {
                let x = &samples[i];
                let (l, g) = model.loss_and_grad_params(x, x.label)?;
                loss_sum += l;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad.iter_mut() {
                *g *= inv;
            }
            if let ModelKind::SoftTree { max_depth, lambda } = model.kind {
                if lambda > 0.0 {
                    let batch_refs: Vec<&BinarySample> =
                        batch.iter().map(|&i| &samples[i]).collect();
                    let (_, pg) = soft_tree_penalty_and_grad(
                        &model.params,
                        model.dimension(),
                        max_depth,
                        lambda,
                        &batch_refs,
                    );
                    for (acc, gi) in grad.iter_mut().zip(&pg) {
                        *acc += gi;
                    }
                }
            }
            if decay > 0.0 {
                for range in &decay_ranges {
                    for i in range.clone() {
                        grad[i] += decay * model.params[i];
                    }
                }
            }
            for ((v, g), p) in velocity
                .iter_mut()
                .zip(&grad)
                .zip(model.params.iter_mut())
            {
                *v = cfg.momentum * *v + *g;
                *p -= cfg.learning_rate * *v;
            }
        }

        let train_loss = loss_sum / n as f64;
        let val_f1 = if val.is_empty() {
            f64::NAN
        } else {
            validation_f1(&model, val)?
        };
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_f1,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        if !val.is_empty() && val_f1 > best_f1 {
            best_f1 = val_f1;
            best_params = Some((epoch, model.params.clone()));
        }
    }

    if let Some((epoch, params)) = best_params {
        model.params = params;
        log.best_epoch = Some(epoch);
    } else {
        log.best_epoch = log.epochs.last().map(|e| e.epoch);
    }
    Ok((model, log))
}

/// F1 with malware as the positive class; zero denominators yield 0.
fn validation_f1(model: &Model, ds: &Dataset) -> Result<f64> {
    let (mut tp, mut fp, mut fun) = (0usize, 0usize, 0usize);
    for s in &ds.samples {
        let pred = model.predict(s)?.label;
        match (s.label, pred) {
            (Label::Malware, Label::Malware) => tp += 1,
            (Label::Benign, Label::Malware) => fp += 1,
            (Label::Malware, Label::Benign) => fun += 1,
            (Label::Benign, Label::Benign) => {}
        }
    }
    let p = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let r = if tp + fun > 0 {
        tp as f64 / (tp + fun) as f64
    } else {
        0.0
    };
    Ok(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    kind: ModelKind,
    space: FeatureSpaceSpec,
    params: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model (kind, space, layout version, parameters) as JSON.
pub fn save_model<P: AsRef<Path>>(model: &Model, path: P) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        kind: model.kind.clone(),
        space: model.space.clone(),
        params: model.params.clone(),
    };
    let file = File::create(path.as_ref())?;
    serde_json::to_writer(BufWriter::new(file), &ckpt)?;
    Ok(())
}

/// Loads a model checkpoint, validating version, layout, and finiteness.
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<Model> {
    let file = File::open(path.as_ref())?;
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Layout(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    ckpt.kind.validate()?;
    let expected = ckpt.kind.param_count(ckpt.space.dimension);
    if ckpt.params.len() != expected {
        return Err(Error::Layout(format!(
            "checkpoint has {} parameters, layout requires {expected}",
            ckpt.params.len()
        )));
    }
    if ckpt.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Layout("checkpoint contains non-finite parameters".into()));
    }
    Ok(Model {
        kind: ckpt.kind,
        space: ckpt.space,
        params: ckpt.params,
    })
}

pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, bound: f64, count: usize, out: &mut Vec<f64>) {
    for _ in 0..count {
        out.push(rng.gen_range(-bound..=bound));
    }
}
