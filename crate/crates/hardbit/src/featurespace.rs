//! Binary feature spaces, sparse datasets, synthetic generation, and
//! stratified train/val/test splits.
//!
//! Samples are sparse sets of active feature indices over a fixed dimension.
//! The on-disk format is libsvm-like with all values fixed to 1:
//!
//! ```text
//! <label> <idx>:1 <idx>:1 ...
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class label. Malware is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Benign,
    Malware,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malware),
            _ => Err(Error::Config(format!("label must be 0 or 1, got {v}"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malware => 1,
        }
    }
}

/// Which flips an attacker may perform on a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationPolicy {
    /// Only 0 -> 1 flips on addable features (realizable-transformation bias).
    AddOnly,
    /// Both 0 -> 1 (addable features) and 1 -> 0 flips.
    FlipAny,
}

/// Describes a binary feature space: its dimension, the mutation policy, and
/// a per-feature addable flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpaceSpec {
    pub dimension: usize,
    pub mutation_policy: MutationPolicy,
    pub addable: Vec<bool>,
}

impl FeatureSpaceSpec {
    /// A space of dimension `d` with the add-only policy and all features addable.
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        Ok(FeatureSpaceSpec {
            dimension: d,
            mutation_policy: MutationPolicy::AddOnly,
            addable: vec![true; d],
        })
    }

    pub fn with_policy(mut self, policy: MutationPolicy) -> Self {
        self.mutation_policy = policy;
        self
    }

    pub fn with_addable(mut self, addable: Vec<bool>) -> Result<Self> {
        if addable.len() != self.dimension {
            return Err(Error::Dimension(format!(
                "addable flags length {} != dimension {}",
                addable.len(),
                self.dimension
            )));
        }
        self.addable = addable;
        Ok(self)
    }
}

/// A sparse binary sample: strictly increasing active indices plus a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinarySample {
    pub active: Vec<u32>,
    pub label: Label,
}

impl BinarySample {
    /// Builds a sample, sorting and deduplicating `active` and validating
    /// every index against `d`.
    pub fn new(mut active: Vec<u32>, label: Label, d: usize) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if let Some(&last) = active.last() {
            if last as usize >= d {
                return Err(Error::IndexRange { index: last, dim: d });
            }
        }
        Ok(BinarySample { active, label })
    }

    pub fn from_dense(dense: &[bool], label: Label) -> Self {
        let active = dense
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i as u32))
            .collect();
        BinarySample { active, label }
    }

    pub fn is_active(&self, feature: u32) -> bool {
        self.active.binary_search(&feature).is_ok()
    }

    pub fn to_dense(&self, d: usize) -> Vec<bool> {
        let mut dense = vec![false; d];
        for &i in &self.active {
            dense[i as usize] = true;
        }
        dense
    }

    /// Number of features on which `self` and `other` differ (L0 distance).
    pub fn hamming(&self, other: &BinarySample) -> usize {
        let (mut i, mut j, mut diff) = (0, 0, 0);
        while i < self.active.len() && j < other.active.len() {
            match self.active[i].cmp(&other.active[j]) {
                std::cmp::Ordering::Less => {
                    diff += 1;
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    diff += 1;
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    i += 1;
                    j += 1;
                }
            }
        }
        diff + (self.active.len() - i) + (other.active.len() - j)
    }

    /// Features on which `self` and `other` differ, sorted ascending.
    pub fn symmetric_difference(&self, other: &BinarySample) -> Vec<u32> {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.active.len() && j < other.active.len() {
            match self.active[i].cmp(&other.active[j]) {
                std::cmp::Ordering::Less => {
                    out.push(self.active[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(other.active[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.active[i..]);
        out.extend_from_slice(&other.active[j..]);
        out
    }
}

/// A collection of samples over one feature space, with optional per-sample
/// order keys (timestamp surrogates) for time-aware splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub space: FeatureSpaceSpec,
    pub samples: Vec<BinarySample>,
    pub order_keys: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(space: FeatureSpaceSpec, samples: Vec<BinarySample>) -> Result<Self> {
        for s in &samples {
            if let Some(&last) = s.active.last() {
                if last as usize >= space.dimension {
                    return Err(Error::IndexRange {
                        index: last,
                        dim: space.dimension,
                    });
                }
            }
        }
        Ok(Dataset {
            space,
            samples,
            order_keys: None,
        })
    }

    pub fn with_order_keys(mut self, keys: Vec<i64>) -> Result<Self> {
        if keys.len() != self.samples.len() {
            return Err(Error::Dimension(format!(
                "{} order keys for {} samples",
                keys.len(),
                self.samples.len()
            )));
        }
        self.order_keys = Some(keys);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn malware_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.label == Label::Malware)
            .count()
    }

    /// New dataset with the same space containing the samples at `indices`.
    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            space: self.space.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            order_keys: self
                .order_keys
                .as_ref()
                .map(|keys| indices.iter().map(|&i| keys[i]).collect()),
        }
    }
}

/// Fractions controlling a train/val/test split.
///
/// Test size is `round((1 - train_fraction) * n)`; the validation set is
/// `floor(val_fraction_of_train * pool)` taken out of the training pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction_of_train: f64,
    pub stratified: bool,
    pub ordered: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.67,
            val_fraction_of_train: 0.10,
            stratified: true,
            ordered: false,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0,1)".into()));
        }
        if !(self.val_fraction_of_train >= 0.0 && self.val_fraction_of_train < 1.0) {
            return Err(Error::Config(
                "val_fraction_of_train must be in [0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// Recipe for a synthetic two-class binary dataset.
///
/// Each feature of each sample is drawn independently from the Bernoulli
/// profile of the sample's class. The profiles are either given explicitly or
/// derived from `overlap`: features are split into two blocks of equal size,
/// each class activates its own block at `activation` rate, and `overlap`
/// blends the two block profiles toward each other (0 = disjoint supports,
/// 1 = identical profiles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n: usize,
    pub malware_ratio: f64,
    pub benign_profile: Vec<f64>,
    pub malware_profile: Vec<f64>,
    pub overlap: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub const DEFAULT_ACTIVATION: f64 = 0.05;

    /// Block profiles at the given overlap, default malware ratio 0.10 and
    /// activation rate [`Self::DEFAULT_ACTIVATION`].
    pub fn with_overlap(d: usize, n: usize, overlap: f64, seed: u64) -> Result<Self> {
        Self::with_overlap_and_activation(d, n, 0.10, overlap, Self::DEFAULT_ACTIVATION, seed)
    }

    pub fn with_overlap_and_activation(
        d: usize,
        n: usize,
        malware_ratio: f64,
        overlap: f64,
        activation: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&overlap) {
            return Err(Error::Config("overlap must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&activation) {
            return Err(Error::Config("activation must be in [0,1]".into()));
        }
        let half = d / 2;
        let mut benign = vec![0.0; d];
        let mut malware = vec![0.0; d];
        // Symmetric blend: at overlap 1 both profiles coincide, at 0 the
        // supports are disjoint.
        let own = (1.0 - overlap / 2.0) * activation;
        let cross = (overlap / 2.0) * activation;
        for j in 0..d {
            if j < half {
                benign[j] = own;
                malware[j] = cross;
            } else {
                benign[j] = cross;
                malware[j] = own;
            }
        }
        Self::with_profiles(d, n, malware_ratio, benign, malware, overlap, seed)
    }

    pub fn with_profiles(
        d: usize,
        n: usize,
        malware_ratio: f64,
        benign_profile: Vec<f64>,
        malware_profile: Vec<f64>,
        overlap: f64,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        if benign_profile.len() != d || malware_profile.len() != d {
            return Err(Error::Dimension(format!(
                "profiles must have length {d}"
            )));
        }
        for p in benign_profile.iter().chain(malware_profile.iter()) {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!(
                    "activation probability {p} outside [0,1]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&malware_ratio) {
            return Err(Error::Config("malware_ratio must be in [0,1]".into()));
        }
        Ok(SyntheticSpec {
            d,
            n,
            malware_ratio,
            benign_profile,
            malware_profile,
            overlap,
            seed,
        })
    }

    pub fn malware_count(&self) -> usize {
        (self.n as f64 * self.malware_ratio).round() as usize
    }
}

/// Parses a sparse dataset file. One sample per nonempty line; indices are
/// sorted and deduplicated; any index `>= d` is a range error naming it.
pub fn load_sparse_dataset<P: AsRef<Path>>(path: P, d: usize) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let space = FeatureSpaceSpec::new(d)?;
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        samples.push(parse_sparse_line(line, lineno + 1, d)?);
    }
    Dataset::new(space, samples)
}

fn parse_sparse_line(line: &str, lineno: usize, d: usize) -> Result<BinarySample> {
    let mut fields = line.split_ascii_whitespace();
    let label_tok = fields.next().ok_or_else(|| Error::Parse {
        line: lineno,
        msg: "missing label".into(),
    })?;
    let label_val: u8 = label_tok.parse().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("label must be 0 or 1, got {label_tok:?}"),
    })?;
    let label = Label::from_u8(label_val).map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("label must be 0 or 1, got {label_tok:?}"),
    })?;

    let mut active = Vec::new();
    for tok in fields {
        let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("expected <index>:1, got {tok:?}"),
        })?;
        let idx: u32 = idx_str.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid feature index {idx_str:?}"),
        })?;
        if val_str != "1" {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("binary features must have value 1, got {val_str:?}"),
            });
        }
        if idx as usize >= d {
            return Err(Error::IndexRange { index: idx, dim: d });
        }
        active.push(idx);
    }
    BinarySample::new(active, label, d)
}

/// Writes a dataset in the sparse text format. Round-trips through
/// [`load_sparse_dataset`] exactly.
pub fn write_sparse_dataset<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for s in &ds.samples {
        write!(w, "{}", s.label.as_u8())?;
        for &i in &s.active {
            write!(w, " {i}:1")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Generates a synthetic dataset. Exactly `round(n * malware_ratio)` samples
/// are malware; generation is bitwise deterministic for a fixed seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::Config("synthetic spec has n = 0".into()));
    }
    let n_mal = spec.malware_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let space = FeatureSpaceSpec::new(spec.d)?;
    let mut samples = Vec::with_capacity(spec.n);
    for idx in 0..spec.n {
        let label = if idx < n_mal {
            Label::Malware
        } else {
            Label::Benign
        };
        let profile = match label {
            Label::Malware => &spec.malware_profile,
            Label::Benign => &spec.benign_profile,
        };
        let active = profile
            .iter()
            .enumerate()
            .filter_map(|(j, &p)| (rng.gen::<f64>() < p).then_some(j as u32))
            .collect();
        samples.push(BinarySample { active, label });
    }
    Dataset::new(space, samples)
}

/// Splits a dataset into (train, val, test).
///
/// Sizes follow the floor-then-distribute rule: the test set takes
/// `round((1 - train_fraction) * n)` samples, validation takes
/// `floor(val_fraction_of_train * pool)` out of the remaining pool. Under
/// stratification, per-class allocations floor the exact proportional share
/// and hand out the remainders by largest fractional part, which keeps every
/// class within one sample of its overall proportion in each split.
pub fn split_dataset(
    ds: &Dataset,
    spec: &SplitSpec,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = ds.len();
    if n == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if spec.ordered && ds.order_keys.is_none() {
        return Err(Error::Config(
            "ordered split requested but dataset has no order keys".into(),
        ));
    }

    let test_total = ((1.0 - spec.train_fraction) * n as f64).round() as usize;
    let pool_total = n - test_total;
    let val_total = (spec.val_fraction_of_train * pool_total as f64).floor() as usize;

    let groups: Vec<Vec<usize>> = if spec.stratified {
        let benign: Vec<usize> = (0..n)
            .filter(|&i| ds.samples[i].label == Label::Benign)
            .collect();
        let malware: Vec<usize> = (0..n)
            .filter(|&i| ds.samples[i].label == Label::Malware)
            .collect();
        let split_count = [n - test_total - val_total, val_total, test_total]
            .iter()
            .filter(|&&s| s > 0)
            .count();
        for (name, g) in [("benign", &benign), ("malware", &malware)] {
            if !g.is_empty() && g.len() < split_count {
                return Err(Error::Stratification(format!(
                    "class {name} has {} samples but {split_count} splits are required",
                    g.len()
                )));
            }
        }
        vec![benign, malware]
    } else {
        vec![(0..n).collect()]
    };

    // Order each group: seeded shuffle, or sort by order key when ordered.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ordered_groups: Vec<Vec<usize>> = groups
        .into_iter()
        .map(|mut g| {
            if spec.ordered {
                let keys = ds.order_keys.as_ref().unwrap();
                g.sort_by_key(|&i| (keys[i], i));
            } else {
                use rand::seq::SliceRandom;
                g.shuffle(&mut rng);
            }
            g
        })
        .collect();

    let sizes: Vec<usize> = ordered_groups.iter().map(|g| g.len()).collect();
    let test_alloc = apportion(test_total, &sizes, n);
    let pool_sizes: Vec<usize> = sizes
        .iter()
        .zip(&test_alloc)
        .map(|(&s, &t)| s - t)
        .collect();
    let mut val_alloc = apportion(val_total, &sizes, n);
    // Clamp validation shares to what each pool can still provide.
    rebalance(&mut val_alloc, &pool_sizes);

    let (mut train_idx, mut val_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());
    for (g, group) in ordered_groups.iter().enumerate() {
        let t = test_alloc[g];
        let v = val_alloc[g];
        let pool_len = group.len() - t;
        // Test takes the tail: the newest samples under ordered splits.
        test_idx.extend_from_slice(&group[pool_len..]);
        val_idx.extend_from_slice(&group[pool_len - v..pool_len]);
        train_idx.extend_from_slice(&group[..pool_len - v]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();

    Ok((
        ds.subset(&train_idx),
        ds.subset(&val_idx),
        ds.subset(&test_idx),
    ))
}

/// Allocates `total` among groups proportionally to `sizes[g] / n`,
/// flooring each share and distributing remainders by largest fraction
/// (ties toward the lower group id).
fn apportion(total: usize, sizes: &[usize], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| total as f64 * s as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = total - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for g in order {
        if leftover == 0 {
            break;
        }
        if alloc[g] < sizes[g] {
            alloc[g] += 1;
            leftover -= 1;
        }
    }
    alloc
}

/// Moves allocation overflow from exhausted groups to ones with spare capacity.
fn rebalance(alloc: &mut [usize], capacity: &[usize]) {
    let mut overflow = 0;
    for (a, &c) in alloc.iter_mut().zip(capacity) {
        if *a > c {
            overflow += *a - c;
            *a = c;
        }
    }
    for (a, &c) in alloc.iter_mut().zip(capacity) {
        while overflow > 0 && *a < c {
            *a += 1;
            overflow -= 1;
        }
    }
}
