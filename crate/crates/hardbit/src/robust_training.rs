//! Min-max robust training: each epoch, a seeded fraction of the malware
//! samples is replaced by adversarial examples generated against the current
//! parameters (the inner maximization), and the epoch then trains on goodware
//! plus unselected clean malware plus the substituted examples.
//!
//! With `alpha = 0` the loop degenerates to standard training, bit for bit
//! under identical seeds: the selection machinery draws from its own RNG
//! stream, so it cannot perturb the shuffle stream of the optimizer.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackOutcome, AttackSpec};
use crate::error::{Error, Result};
use crate::featurespace::{BinarySample, Dataset, Label};
use crate::models::{train_loop, Model, TrainConfig, TrainLog};
use crate::util::mix_seed;

/// Adversarial-training configuration: which attack solves the inner
/// maximization, at what flip bound, and on what fraction of the malware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ATConfig {
    pub attack: AttackSpec,
    pub epsilon: usize,
    pub alpha: f64,
    pub train: TrainConfig,
    #[serde(default = "default_regenerate")]
    pub regenerate_each_epoch: bool,
}

fn default_regenerate() -> bool {
    true
}

impl ATConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Per-epoch record of the inner maximization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Adversarial examples used this epoch: `round(alpha * malware_count)`.
    pub ae_count: usize,
    /// How many of those were actually attacked (predicted malware when
    /// selected); the rest pass through unperturbed.
    pub attacked: usize,
    pub attack_successes: usize,
    /// Mean loss of the generated examples under the generating parameters —
    /// the confidence of the inner maximization.
    pub mean_ae_loss: Option<f64>,
    /// Per-feature flip counts from this epoch's generation, sparse.
    pub flips: Vec<(u32, u64)>,
    pub flips_total: u64,
    pub train_loss: f64,
    pub val_f1: f64,
    pub seconds_per_ae: f64,
    pub epoch_seconds: f64,
}

/// Full adversarial-training log; serializes to JSON lines, one epoch per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ATLog {
    pub dimension: usize,
    pub epochs: Vec<EpochLog>,
}

/// Deterministic counters of an [`ATLog`], safe to compare across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ATSummary {
    pub epochs: usize,
    pub ae_total: usize,
    pub attack_successes: usize,
    pub flips_total: u64,
    pub mean_ae_loss: Option<f64>,
}

/// Wall-clock hardening cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ATTiming {
    pub mean_seconds_per_ae: f64,
    pub total_seconds: f64,
}

impl ATLog {
    /// Total flips per feature across all epochs, dense over the dimension.
    pub fn total_flip_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.dimension];
        for e in &self.epochs {
            for &(f, c) in &e.flips {
                counts[f as usize] += c;
            }
        }
        counts
    }

    pub fn summary(&self) -> ATSummary {
        let ae_total: usize = self.epochs.iter().map(|e| e.ae_count).sum();
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for e in &self.epochs {
            if let Some(l) = e.mean_ae_loss {
                loss_sum += l * e.attacked as f64;
                loss_n += e.attacked;
            }
        }
        ATSummary {
            epochs: self.epochs.len(),
            ae_total,
            attack_successes: self.epochs.iter().map(|e| e.attack_successes).sum(),
            flips_total: self.epochs.iter().map(|e| e.flips_total).sum(),
            mean_ae_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
        }
    }

    pub fn timing(&self) -> ATTiming {
        let attacked: usize = self.epochs.iter().map(|e| e.attacked).sum();
        let ae_seconds: f64 = self
            .epochs
            .iter()
            .map(|e| e.seconds_per_ae * e.attacked as f64)
            .sum();
        ATTiming {
            mean_seconds_per_ae: if attacked > 0 {
                ae_seconds / attacked as f64
            } else {
                0.0
            },
            total_seconds: self.epochs.iter().map(|e| e.epoch_seconds).sum(),
        }
    }

    pub fn write_jsonl<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = File::create(path.as_ref())?;
        let mut w = BufWriter::new(file);
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<P: AsRef<Path>>(path: P, dimension: usize) -> Result<ATLog> {
        let file = File::open(path.as_ref())?;
        let reader = BufReader::new(file);
        let mut epochs = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            epochs.push(serde_json::from_str(&line)?);
        }
        Ok(ATLog { dimension, epochs })
    }
}

/// Seed for the attack on training sample `idx` at `epoch`.
pub(crate) fn at_sample_seed(train_seed: u64, epoch: usize, idx: usize) -> u64 {
    mix_seed(train_seed, 3, mix_seed(epoch as u64, idx as u64, 0))
}

struct Generation {
    replaced: Vec<(usize, BinarySample)>,
    attacked: usize,
    successes: usize,
    loss_sum: f64,
    flips: BTreeMap<u32, u64>,
    flips_total: u64,
    ae_seconds: f64,
}

/// Inner maximization for one epoch: attack each selected sample against the
/// current parameters, in parallel, collecting outcomes in sample order.
fn generate_aes(
    model: &Model,
    samples: &[BinarySample],
    selected: &[usize],
    cfg: &ATConfig,
    epoch: usize,
) -> Result<Generation> {
    let results: Vec<(usize, Option<AttackOutcome>, f64)> = selected
        .par_iter()
        .map(|&idx| -> Result<(usize, Option<AttackOutcome>, f64)> {
            let x = &samples[idx];
            let started = Instant::now();
            let outcome = if model.predict(x)?.label == Label::Malware {
                let seed = at_sample_seed(cfg.train.seed, epoch, idx);
                Some(run_attack(model, x, &cfg.attack, cfg.epsilon, seed)?)
            } else {
                // Already misclassified: the clean sample is its own
                // best-effort maximizer.
                None
            };
            Ok((idx, outcome, started.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;

    let mut gen = Generation {
        replaced: Vec::with_capacity(selected.len()),
        attacked: 0,
        successes: 0,
        loss_sum: 0.0,
        flips: BTreeMap::new(),
        flips_total: 0,
        ae_seconds: 0.0,
    };
    for (idx, outcome, secs) in results {
        match outcome {
            Some(out) => {
                if out.flips_used > cfg.epsilon {
                    return Err(Error::Numeric(format!(
                        "attack produced {} flips above bound {}",
                        out.flips_used, cfg.epsilon
                    )));
                }
                gen.attacked += 1;
                if out.success {
                    gen.successes += 1;
                }
                gen.loss_sum += model.loss(&out.x_adv, Label::Malware)?;
                for f in out.flipped_features() {
                    *gen.flips.entry(f).or_insert(0) += 1;
                }
                gen.flips_total += out.flips_used as u64;
                gen.ae_seconds += secs;
                gen.replaced.push((idx, out.x_adv));
            }
            None => gen.replaced.push((idx, samples[idx].clone())),
        }
    }
    Ok(gen)
}

/// Hardens a model by solving the min-max problem. Returns the
/// best-validation-F1 checkpoint (validated on clean data) plus the log.
pub fn adversarial_train(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &ATConfig,
) -> Result<(Model, ATLog)> {
    cfg.validate()?;
    let malware: Vec<usize> = (0..train.len())
        .filter(|&i| train.samples[i].label == Label::Malware)
        .collect();
    if cfg.alpha > 0.0 && malware.is_empty() {
        return Err(Error::Config(
            "alpha > 0 but the training set contains no malware".into(),
        ));
    }
    let ae_count = (cfg.alpha * malware.len() as f64).round() as usize;

    let mut select_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    select_rng.set_stream(2);

    let mut epoch_logs: Vec<EpochLog> = Vec::new();
    let mut cached: Option<Vec<(usize, BinarySample)>> = None;

    let hook = |current: &Model, epoch: usize| -> Result<Option<Vec<BinarySample>>> {
        if ae_count == 0 {
            epoch_logs.push(EpochLog {
                epoch,
                ae_count: 0,
                attacked: 0,
                attack_successes: 0,
                mean_ae_loss: None,
                flips: vec![],
                flips_total: 0,
                train_loss: 0.0,
                val_f1: 0.0,
                seconds_per_ae: 0.0,
                epoch_seconds: 0.0,
            });
            return Ok(None);
        }

        let replaced = if let Some(cache) = &cached {
            // Cached mode: reuse the epoch-0 examples and selection.
            let mean_loss = {
                let mut sum = 0.0;
                for (_, x_adv) in cache {
                    sum += current.loss(x_adv, Label::Malware)?;
                }
                sum / cache.len() as f64
            };
            epoch_logs.push(EpochLog {
                epoch,
                ae_count,
                attacked: 0,
                attack_successes: 0,
                mean_ae_loss: Some(mean_loss),
                flips: vec![],
                flips_total: 0,
                train_loss: 0.0,
                val_f1: 0.0,
                seconds_per_ae: 0.0,
                epoch_seconds: 0.0,
            });
            cache.clone()
        } else {
            let mut order = malware.clone();
            order.shuffle(&mut select_rng);
            let mut selected: Vec<usize> = order[..ae_count].to_vec();
            selected.sort_unstable();

            let gen = generate_aes(current, &train.samples, &selected, cfg, epoch)?;
            epoch_logs.push(EpochLog {
                epoch,
                ae_count,
                attacked: gen.attacked,
                attack_successes: gen.successes,
                mean_ae_loss: (gen.attacked > 0).then(|| gen.loss_sum / gen.attacked as f64),
                flips: gen.flips.iter().map(|(&f, &c)| (f, c)).collect(),
                flips_total: gen.flips_total,
                train_loss: 0.0,
                val_f1: 0.0,
                seconds_per_ae: if gen.attacked > 0 {
                    gen.ae_seconds / gen.attacked as f64
                } else {
                    0.0
                },
                epoch_seconds: 0.0,
            });
            if !cfg.regenerate_each_epoch {
                cached = Some(gen.replaced.clone());
            }
            gen.replaced
        };

        let mut samples = train.samples.clone();
        for (idx, x_adv) in replaced {
            samples[idx] = x_adv;
        }
        Ok(Some(samples))
    };

    let (hardened, train_log): (Model, TrainLog) = train_loop(model, train, val, &cfg.train, hook)?;

    for (e, stats) in epoch_logs.iter_mut().zip(&train_log.epochs) {
        e.train_loss = stats.train_loss;
        e.val_f1 = stats.val_f1;
        e.epoch_seconds = stats.seconds;
    }
    Ok((
        hardened,
        ATLog {
            dimension: train.space.dimension,
            epochs: epoch_logs,
        },
    ))
}
