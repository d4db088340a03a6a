//! Deterministic pieces shared by every peer: seeded normals, tasks, the
//! zeroth-order step, gradient companding, the wire format and the privacy
//! calculation.

pub mod codec;
pub mod params;
pub mod privacy;
pub mod rng;
pub mod spsa;
pub mod tasks;
pub mod wire;

pub use codec::{CompandRange, GradByte};
pub use params::{checksum, ParameterVector};
pub use rng::{derive_seed, GaussianStream, PerturbationSeed};
pub use spsa::{apply_ledger, projected_gradient, GradientLedger, MachineKey, Snapshot};
pub use tasks::{Batch, Task, TaskKind};
