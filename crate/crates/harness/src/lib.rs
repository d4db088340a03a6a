//! Drives multi-node runs on one machine: cluster orchestration with fault
//! injection, the sequential oracle, baseline communication costs and
//! report output.

pub mod baselines;
pub mod cluster;
pub mod oracle;
pub mod privacy_cli;
pub mod report;

pub use baselines::{baseline_bytes, BaselineModel, Scheme};
pub use cluster::{run_cluster, run_cluster_on, ClusterSpec, Fault, FaultAction, NodeRun, RunReport, TransportKind};
pub use oracle::{sequential_oracle, single_node_losses};
pub use report::emit_report;
