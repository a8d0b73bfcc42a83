//! Evasion attacks over binary features under an L0 flip budget.
//!
//! Four attacks share the [`AttackOutcome`] contract:
//!
//! * [`attack_pgd_binary`] — gradient-guided multi-flip iterations,
//! * [`attack_jsma_binary`] — saliency greedy, one flip per step,
//! * [`attack_greedy_pk`] — greedy over a realizable transformation set,
//! * [`attack_query_zk`] — decision-based, query-only random search over the
//!   same transformation set.
//!
//! The zero-knowledge attack is separated at the interface level: it receives
//! only a [`PredictOracle`], so it cannot touch gradients.

mod greedy_pk;
mod jsma;
mod pgd;
mod query_zk;

pub use greedy_pk::attack_greedy_pk;
pub use jsma::attack_jsma_binary;
pub use pgd::attack_pgd_binary;
pub use query_zk::attack_query_zk;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurespace::{BinarySample, FeatureSpaceSpec, Label, MutationPolicy};
use crate::models::{Model, Prediction};

/// L0 flip budget, plus the query budget for decision-based attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: usize,
    pub query_limit: Option<usize>,
}

impl Budget {
    pub fn flips(epsilon: usize) -> Self {
        Budget {
            epsilon,
            query_limit: None,
        }
    }

    pub fn with_queries(epsilon: usize, query_limit: usize) -> Self {
        Budget {
            epsilon,
            query_limit: Some(query_limit),
        }
    }
}

/// Feature-space image of one problem-space transformation: a nonempty
/// add-only set of feature indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transformation {
    pub id: String,
    pub adds: Vec<u32>,
}

impl Transformation {
    pub fn new(id: impl Into<String>, mut adds: Vec<u32>) -> Result<Self> {
        adds.sort_unstable();
        adds.dedup();
        if adds.is_empty() {
            return Err(Error::Config("transformation adds no features".into()));
        }
        Ok(Transformation {
            id: id.into(),
            adds,
        })
    }
}

/// The allowed perturbation set for realizable attacks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationSet {
    transformations: Vec<Transformation>,
}

impl TransformationSet {
    pub fn new(transformations: Vec<Transformation>) -> Result<Self> {
        let mut ids: Vec<&str> = transformations.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("transformation ids must be unique".into()));
        }
        Ok(TransformationSet { transformations })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transformation> {
        self.transformations.iter()
    }

    pub fn len(&self) -> usize {
        self.transformations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transformations.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Transformation {
        &self.transformations[idx]
    }

    /// Checks that every referenced feature index fits the dimension.
    pub fn validate_dimension(&self, d: usize) -> Result<()> {
        for t in &self.transformations {
            if let Some(&max) = t.adds.last() {
                if max as usize >= d {
                    return Err(Error::IndexRange { index: max, dim: d });
                }
            }
        }
        Ok(())
    }
}

/// Loads a transformation set from a text file: one `id: i,j,k` per line.
pub fn load_transformations<P: AsRef<Path>>(path: P, d: usize) -> Result<TransformationSet> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut transformations = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "expected `id: i,j,k`".into(),
        })?;
        let mut adds = Vec::new();
        for tok in rest.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            let idx: u32 = tok.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("invalid feature index {tok:?}"),
            })?;
            if idx as usize >= d {
                return Err(Error::IndexRange { index: idx, dim: d });
            }
            adds.push(idx);
        }
        transformations.push(Transformation::new(id.trim(), adds).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    TransformationSet::new(transformations)
}

pub fn write_transformations<P: AsRef<Path>>(ts: &TransformationSet, path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for t in ts.iter() {
        let idx: Vec<String> = t.adds.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}: {}", t.id, idx.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// One attack step: the move taken and the loss (gradient attacks) or the
/// malware score margin (decision-based attacks) immediately after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub mv: Move,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Move {
    Add { feature: u32 },
    Remove { feature: u32 },
    Apply { id: String, added: Vec<u32> },
}

/// Result of one attack run against one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub original: BinarySample,
    pub x_adv: BinarySample,
    pub success: bool,
    pub trace: Vec<TraceStep>,
    pub flips_used: usize,
    pub queries_used: usize,
}

impl AttackOutcome {
    /// Features on which the adversarial example differs from the original.
    pub fn flipped_features(&self) -> Vec<u32> {
        self.original.symmetric_difference(&self.x_adv)
    }
}

/// Query-only access to a classifier; all a zero-knowledge attacker gets.
pub trait PredictOracle {
    fn query(&self, x: &BinarySample) -> crate::error::Result<Prediction>;
}

impl PredictOracle for Model {
    fn query(&self, x: &BinarySample) -> crate::error::Result<Prediction> {
        self.predict(x)
    }
}

/// An attack plus its own parameters; the flip budget is supplied separately
/// so one spec can be swept across bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackSpec {
    Pgd { iters: usize },
    Jsma,
    GreedyPk { transformations: TransformationSet },
    QueryZk {
        transformations: TransformationSet,
        query_limit: usize,
    },
}

impl AttackSpec {
    pub fn pgd_default() -> Self {
        AttackSpec::Pgd { iters: 10 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Pgd { .. } => "pgd",
            AttackSpec::Jsma => "jsma",
            AttackSpec::GreedyPk { .. } => "greedy-pk",
            AttackSpec::QueryZk { .. } => "query-zk",
        }
    }
}

/// Runs the configured attack at flip budget `epsilon`, with the mutation
/// policy taken from the model's feature space. `seed` only matters for the
/// stochastic zero-knowledge attack.
pub fn run_attack(
    model: &Model,
    x: &BinarySample,
    spec: &AttackSpec,
    epsilon: usize,
    seed: u64,
) -> Result<AttackOutcome> {
    let policy = model.space.mutation_policy;
    match spec {
        AttackSpec::Pgd { iters } => {
            attack_pgd_binary(model, x, &Budget::flips(epsilon), *iters, policy)
        }
        AttackSpec::Jsma => attack_jsma_binary(model, x, &Budget::flips(epsilon), policy),
        AttackSpec::GreedyPk { transformations } => {
            attack_greedy_pk(model, x, transformations, &Budget::flips(epsilon))
        }
        AttackSpec::QueryZk {
            transformations,
            query_limit,
        } => attack_query_zk(
            model,
            &model.space,
            x,
            transformations,
            &Budget::with_queries(epsilon, *query_limit),
            seed,
        ),
    }
}

/// Working copy of a sample during an attack: a dense mask plus the running
/// L0 distance from the original.
pub(crate) struct FlipState<'a> {
    original: &'a BinarySample,
    dense: Vec<bool>,
    distance: usize,
    d: usize,
}

impl<'a> FlipState<'a> {
    pub(crate) fn new(x: &'a BinarySample, d: usize) -> Self {
        FlipState {
            original: x,
            dense: x.to_dense(d),
            distance: 0,
            d,
        }
    }

    pub(crate) fn distance(&self) -> usize {
        self.distance
    }

    pub(crate) fn is_active(&self, feature: u32) -> bool {
        self.dense[feature as usize]
    }

    /// +1 if flipping `feature` moves away from the original, -1 if back.
    pub(crate) fn flip_delta(&self, feature: u32) -> isize {
        if self.dense[feature as usize] == self.original.is_active(feature) {
            1
        } else {
            -1
        }
    }

    pub(crate) fn flip(&mut self, feature: u32) {
        let delta = self.flip_delta(feature);
        self.dense[feature as usize] = !self.dense[feature as usize];
        self.distance = (self.distance as isize + delta) as usize;
    }

    /// Applies every inactive feature of `adds`, returning the newly set
    /// indices. Caller is responsible for budget checks.
    pub(crate) fn apply_adds(&mut self, adds: &[u32]) -> Vec<u32> {
        let mut added = Vec::new();
        for &i in adds {
            if !self.dense[i as usize] {
                self.flip(i);
                added.push(i);
            }
        }
        added
    }

    pub(crate) fn new_flips(&self, adds: &[u32]) -> usize {
        adds.iter().filter(|&&i| !self.dense[i as usize]).count()
    }

    pub(crate) fn sample(&self, label: Label) -> BinarySample {
        BinarySample::from_dense(&self.dense, label)
    }

    pub(crate) fn snapshot(&self) -> (Vec<bool>, usize) {
        (self.dense.clone(), self.distance)
    }

    pub(crate) fn restore(&mut self, snap: &(Vec<bool>, usize)) {
        self.dense.copy_from_slice(&snap.0);
        self.distance = snap.1;
    }

    pub(crate) fn dimension(&self) -> usize {
        self.d
    }
}

/// Candidate single-feature flips under the mutation policy, in feature order.
pub(crate) fn admissible_flips(
    state: &FlipState,
    space: &FeatureSpaceSpec,
    policy: MutationPolicy,
) -> Vec<u32> {
    let mut out = Vec::new();
    for i in 0..state.dimension() as u32 {
        if state.is_active(i) {
            if policy == MutationPolicy::FlipAny {
                out.push(i);
            }
        } else if space.addable[i as usize] {
            out.push(i);
        }
    }
    out
}

/// Shared precondition: attacks only target correctly detected malware.
pub(crate) fn require_true_positive(model: &Model, x: &BinarySample) -> Result<Prediction> {
    let pred = model.predict(x)?;
    if pred.label != Label::Malware {
        return Err(Error::Precondition(
            "attack target must be predicted malware".into(),
        ));
    }
    Ok(pred)
}

#[cfg(test)]
mod tests;
