//! Interpretation tools: joint feature-importance density over defender and
//! attacker flip frequencies, decision-function roughness, and plot-ready
//! exports for external embedding tools.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackOutcome;
use crate::error::{Error, Result};
use crate::featurespace::{BinarySample, Dataset, MutationPolicy};
use crate::models::Model;
use crate::robust_training::ATLog;

/// How often each feature was flipped while hardening (context A) and while
/// attacking the hardened model (context B).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipFrequencyTable {
    pub dimension: usize,
    pub at_counts: Vec<u64>,
    pub attack_counts: Vec<u64>,
}

impl FlipFrequencyTable {
    pub fn at_total(&self) -> u64 {
        self.at_counts.iter().sum()
    }

    pub fn attack_total(&self) -> u64 {
        self.attack_counts.iter().sum()
    }
}

/// Counts every flip event per feature in both contexts. Each adversarial
/// example contributes the features on which it differs from its original.
pub fn flip_frequency_table(
    at_log: &ATLog,
    attack_traces: &[AttackOutcome],
) -> Result<FlipFrequencyTable> {
    let d = at_log.dimension;
    let at_counts = at_log.total_flip_counts();
    let mut attack_counts = vec![0u64; d];
    for outcome in attack_traces {
        for f in outcome.flipped_features() {
            if f as usize >= d {
                return Err(Error::Dimension(format!(
                    "attack trace flips feature {f} outside dimension {d}"
                )));
            }
            attack_counts[f as usize] += 1;
        }
    }
    Ok(FlipFrequencyTable {
        dimension: d,
        at_counts,
        attack_counts,
    })
}

/// Joint density over per-feature (AT flips, attack flips) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JdpDensity {
    /// `grid[iy][ix]` cell masses summing to 1; empty when degenerate.
    pub grid: Vec<Vec<f64>>,
    /// Cell-center coordinates along the AT axis (x) and attack axis (y).
    pub x_centers: Vec<f64>,
    pub y_centers: Vec<f64>,
    /// Raw per-feature count pairs, always emitted for external plotting.
    pub raw: Vec<(u64, u64)>,
    /// Set when every count is zero and no density can be estimated.
    pub degenerate: bool,
    pub bandwidth: (f64, f64),
}

impl JdpDensity {
    pub fn total_mass(&self) -> f64 {
        self.grid.iter().flatten().sum()
    }

    /// Coordinates of the highest-mass cell.
    pub fn mode(&self) -> Option<(f64, f64)> {
        let mut best: Option<(f64, (f64, f64))> = None;
        for (iy, row) in self.grid.iter().enumerate() {
            for (ix, &mass) in row.iter().enumerate() {
                if best.map_or(true, |(b, _)| mass > b) {
                    best = Some((mass, (self.x_centers[ix], self.y_centers[iy])));
                }
            }
        }
        best.map(|(_, c)| c)
    }
}

/// Gaussian kernel density over the per-feature count pairs, with each
/// feature weighted by its total flip count so that features dominating both
/// contexts dominate the density. Bandwidth defaults to Silverman's rule on
/// the participating points. Cell masses are normalized to sum to 1.
pub fn jdp_density(
    table: &FlipFrequencyTable,
    grid: usize,
    bandwidth: Option<f64>,
) -> Result<JdpDensity> {
    if grid == 0 {
        return Err(Error::Config("density grid must have at least one cell".into()));
    }
    let raw: Vec<(u64, u64)> = table
        .at_counts
        .iter()
        .zip(&table.attack_counts)
        .map(|(&a, &b)| (a, b))
        .collect();

    let points: Vec<(f64, f64, f64)> = raw
        .iter()
        .filter(|(a, b)| a + b > 0)
        .map(|&(a, b)| (a as f64, b as f64, (a + b) as f64))
        .collect();
    if points.is_empty() {
        return Ok(JdpDensity {
            grid: vec![],
            x_centers: vec![],
            y_centers: vec![],
            raw,
            degenerate: true,
            bandwidth: (0.0, 0.0),
        });
    }

    let (hx, hy) = match bandwidth {
        Some(h) => {
            if !(h > 0.0) {
                return Err(Error::Config("bandwidth must be positive".into()));
            }
            (h, h)
        }
        None => {
            let n = points.len() as f64;
            let silverman = |vals: Vec<f64>| -> f64 {
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (var.sqrt() * n.powf(-1.0 / 6.0)).max(0.5)
            };
            (
                silverman(points.iter().map(|p| p.0).collect()),
                silverman(points.iter().map(|p| p.1).collect()),
            )
        }
    };

    let min_max = |get: fn(&(f64, f64, f64)) -> f64, h: f64| -> (f64, f64) {
        let lo = points.iter().map(get).fold(f64::INFINITY, f64::min) - 3.0 * h;
        let hi = points.iter().map(get).fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
        (lo, hi)
    };
    let (x_lo, x_hi) = min_max(|p| p.0, hx);
    let (y_lo, y_hi) = min_max(|p| p.1, hy);
    let centers = |lo: f64, hi: f64| -> Vec<f64> {
        let step = (hi - lo) / grid as f64;
        (0..grid).map(|i| lo + step * (i as f64 + 0.5)).collect()
    };
    let x_centers = centers(x_lo, x_hi);
    let y_centers = centers(y_lo, y_hi);

    let mut cells = vec![vec![0.0; grid]; grid];
    let mut total = 0.0;
    for (iy, &cy) in y_centers.iter().enumerate() {
        for (ix, &cx) in x_centers.iter().enumerate() {
            let mut mass = 0.0;
            for &(px, py, w) in &points {
                let dx = (cx - px) / hx;
                let dy = (cy - py) / hy;
                mass += w * (-0.5 * (dx * dx + dy * dy)).exp();
            }
            cells[iy][ix] = mass;
            total += mass;
        }
    }
    if total > 0.0 {
        for row in cells.iter_mut() {
            for c in row.iter_mut() {
                *c /= total;
            }
        }
    }

    Ok(JdpDensity {
        grid: cells,
        x_centers,
        y_centers,
        raw,
        degenerate: false,
        bandwidth: (hx, hy),
    })
}

/// Decision-function roughness: mean prediction-change rate over uniform
/// draws inside each sample's flip ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughnessEstimate {
    pub gamma: f64,
    pub per_sample: Vec<f64>,
    pub m: usize,
    pub epsilon: usize,
    pub seed: u64,
    /// Sampling scheme note carried into serialized output.
    pub sampling: String,
}

/// Estimates roughness by drawing, per sample, `m` synthetic points: a radius
/// `k` uniform in `1..=epsilon`, then `k` distinct admissible features flipped
/// uniformly at random. `r` is the share of draws whose prediction differs
/// from the sample's own; gamma is the mean `r` over samples.
pub fn roughness_gamma(
    model: &Model,
    samples: &[BinarySample],
    epsilon: usize,
    m: usize,
    seed: u64,
) -> Result<RoughnessEstimate> {
    if epsilon == 0 {
        return Err(Error::Config(
            "roughness requires epsilon >= 1 (degenerate ball)".into(),
        ));
    }
    if m == 0 {
        return Err(Error::Config("roughness requires m >= 1".into()));
    }
    let d = model.dimension();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_sample = Vec::with_capacity(samples.len());
    for x in samples {
        let base = model.predict(x)?.label;
        let candidates: Vec<u32> = (0..d as u32)
            .filter(|&i| {
                if x.is_active(i) {
                    model.space.mutation_policy == MutationPolicy::FlipAny
                } else {
                    model.space.addable[i as usize]
                }
            })
            .collect();
        if candidates.is_empty() {
            per_sample.push(0.0);
            continue;
        }
        let mut scratch = candidates.clone();
        let mut changed = 0usize;
        for _ in 0..m {
            let k = rng.gen_range(1..=epsilon).min(scratch.len());
            // Partial Fisher-Yates: uniform k-subset in the prefix.
            for j in 0..k {
                let pick = rng.gen_range(j..scratch.len());
                scratch.swap(j, pick);
            }
            let mut dense = x.to_dense(d);
            for &f in &scratch[..k] {
                dense[f as usize] = !dense[f as usize];
            }
            let drawn = BinarySample::from_dense(&dense, x.label);
            if model.predict(&drawn)?.label != base {
                changed += 1;
            }
        }
        per_sample.push(changed as f64 / m as f64);
    }
    let gamma = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    Ok(RoughnessEstimate {
        gamma,
        per_sample,
        m,
        epsilon,
        seed,
        sampling: "radius uniform in 1..=epsilon, then a uniform subset of admissible flips"
            .to_string(),
    })
}

/// Writes the dataset as a dense numeric matrix with a trailing label column,
/// one row per sample — input for external embedding/visualization tools.
pub fn export_embeddings<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    let d = ds.space.dimension;
    for s in &ds.samples {
        let dense = s.to_dense(d);
        for on in &dense {
            write!(w, "{} ", u8::from(*on))?;
        }
        writeln!(w, "{}", s.label.as_u8())?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with one row per feature: `feature,at_count,attack_count`.
pub fn write_flip_table_csv<P: AsRef<Path>>(table: &FlipFrequencyTable, path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "feature,at_count,attack_count")?;
    for f in 0..table.dimension {
        writeln!(w, "{f},{},{}", table.at_counts[f], table.attack_counts[f])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format CSV of the density grid: `at_flips,attack_flips,mass`.
pub fn write_density_csv<P: AsRef<Path>>(density: &JdpDensity, path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "at_flips,attack_flips,mass")?;
    for (iy, row) in density.grid.iter().enumerate() {
        for (ix, mass) in row.iter().enumerate() {
            writeln!(
                w,
                "{},{},{}",
                density.x_centers[ix], density.y_centers[iy], mass
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
