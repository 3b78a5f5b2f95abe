//! Experiment harness behind the `extraction-lab` binary: run documents,
//! budget sweeps, ablations and their CSV metrics.

pub mod config;
pub mod metrics;
pub mod sweep;

pub use config::{OracleSource, RunConfig};
pub use metrics::{MetricsRow, RowKind};
pub use sweep::{run_ablation, run_sweep, SweepSpec};
