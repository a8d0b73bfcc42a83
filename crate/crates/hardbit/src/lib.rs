//! hardbit — adversarial training and robustness evaluation for
//! binary-feature classifiers under L0-bounded evasion attacks.
//!
//! The crate provides, end to end:
//!
//! * [`featurespace`] — sparse binary datasets, synthetic generation, and
//!   stratified or time-ordered train/val/test splits;
//! * [`models`] — three differentiable two-class discriminants (linear
//!   margin, mlp, soft decision tree) with input- and parameter-gradient
//!   contracts and deterministic mini-batch training;
//! * [`attacks`] — four evasion attacks over an L0 flip budget with full
//!   trace recording, including realizable transformation-set attacks and a
//!   query-only decision-based attack;
//! * [`robust_training`] — the min-max hardening loop with adversarial
//!   fraction and per-epoch logging;
//! * [`evaluation`] — clean metrics, robust accuracy, robustness gained over
//!   a vanilla baseline, and adversarial-example confidence;
//! * [`analysis`] — joint feature-importance densities, decision-function
//!   roughness, and plot-ready exports;
//! * [`harness`] — reproducible experiment runner and grid sweeps with an
//!   append-only result sink.
//!
//! Every stochastic operation is seeded; rerunning a configuration
//! reproduces its metrics byte for byte. See the `examples/` directory for
//! one runnable walkthrough per capability, and the `hardbit` binary for the
//! command-line interface.

pub mod analysis;
pub mod attacks;
pub mod error;
pub mod evaluation;
pub mod featurespace;
pub mod harness;
pub mod models;
pub mod robust_training;

pub use error::{Error, Result};

pub(crate) mod util {
    /// splitmix64 finalizer.
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Deterministic, decorrelated seed derivation for sub-streams.
    pub fn mix_seed(base: u64, stream: u64, index: u64) -> u64 {
        splitmix(base.wrapping_add(splitmix(stream.wrapping_add(splitmix(index)))))
    }
}
