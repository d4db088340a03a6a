//! A training peer: configuration, transports, the per-iteration state
//! machine and its metrics.

pub mod config;
pub mod meter;
pub mod metrics;
pub mod node;
pub mod registry;
pub mod transport;

pub use config::{ConfigError, RunConfig, TaskConfig, TaskName};
pub use meter::{Meter, MeterSnapshot};
pub use metrics::IterationMetrics;
pub use node::{compute_gradients, ledger_from_record, Event, EventKind, Node, NodeError, NodeHooks, NodeReport, Outcome};
pub use transport::{Incoming, LoopbackNet, Session, TcpTransport, Transport, TransportError};

/// The `HELLO` contents a node with this configuration sends.
pub fn session_for(cfg: &RunConfig, machine_time: u64, address: &str) -> Result<Session, ConfigError> {
    Ok(Session {
        machine_time,
        address: address.to_string(),
        dimension: cfg.build_task()?.dim() as u64,
        quantized: cfg.quantized,
        g_min: cfg.g_min,
        g_max: cfg.g_max,
    })
}
