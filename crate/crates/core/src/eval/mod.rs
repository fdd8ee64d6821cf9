//! Metrics, the paired evaluation protocol and multi-seed experiments.

mod experiments;
mod metrics;
mod protocol;

pub use experiments::{quantization_tradeoff, run_ablation_matrix, AblationResult, SeedContext};
pub use metrics::{
    conditional_accuracy, energy_distance, median, median_bandwidth, mmd_rbf, mode_coverage, MetricReport, Reference,
};
pub use protocol::EvalSet;
