//! Desk-scale model-extraction laboratory.
//!
//! A teacher classifier is trained on hidden "true" data and exposed only
//! through a call-budgeted [`oracle::Oracle`]. The attack in [`aspkd`] copies
//! it into a smaller student using a synthetic proxy pool:
//!
//! 1. proxy samples are picked near per-class latent centroids ([`sampler`]),
//! 2. the picked samples are labeled by the oracle and the student is trained,
//! 3. the rest of the pool is pseudo-labeled by kNN in the student's latent
//!    space ([`pseudo`]) and the student is trained on everything,
//!
//! repeated until the budget is spent.
//!
//! Everything runs on `f64` and is deterministic under a seed.

pub mod aspkd;
pub mod data;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod pseudo;
pub mod sampler;
pub mod scenario;

pub use aspkd::{
    run_ablation_suite, run_aspkd, AblationTable, AspkdConfig, AttackError, AttackMode,
    AttackOutcome, LabeledProxySet, RunReport,
};
pub use data::{DatasetSpec, Generator, LabeledDataset, ProxyPool};
pub use nn::{Network, NetworkSpec, TrainConfig};
pub use oracle::{LabelMode, LocalOracle, Oracle, OracleError, OracleResponse};
pub use pseudo::DistanceMetric;

/// Seeded random source used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's random source from a seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
