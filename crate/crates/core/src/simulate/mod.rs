//! Monte-Carlo design: simulated panels, evaluation metrics and the replication loop.

pub mod dgp;
pub mod experiment;
pub mod metrics;

pub use dgp::{gen_panel, simulate_panel, DgpConfig, GroundTruth, GroupDesign, Simulated};
pub use experiment::{run_experiment, summarize, ExperimentConfig, ExperimentSummary, ReplicationRecord};
