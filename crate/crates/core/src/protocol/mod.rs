//! The continual run, its accuracy matrix and metrics, the stationary mode
//! and ablations.
//!
//! Stage 0 trains on the labeled source split. Each later stage sees one
//! unlabeled target domain: labels are refreshed once per epoch, batches
//! mix current samples with replayed exemplars and gated augmentations, and
//! after training the domain enters the memory under the trained model's
//! labels. Every stage ends by evaluating all domains.

mod config;
mod metrics;
pub mod results;
mod runner;

pub use config::{AblationVariant, ModelShape, RunConfig};
pub use metrics::{compute_metrics, AccuracyMatrix, MetricsReport};
pub use runner::{
    ablate, accuracy, evaluate_row, prepare_domains, run_cdsl, run_stationary, source_only_row, LabelDiagnostic, MemoryStat,
    PreparedDomain, RngUsage, RunOutput, StationaryOutput, StepLog,
};
