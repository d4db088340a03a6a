//! Paired-perturbation gradient estimates and ledger application.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::params::ParameterVector;
use crate::rng::{derive_seed, perturb_parameters, perturb_parameters_at, PerturbError, PerturbationSeed};
use crate::tasks::{Batch, Task, TaskError};

#[derive(Debug, Error, PartialEq)]
pub enum SpsaError {
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("perturbation scale must be positive and finite, got {0}")]
    BadEpsilon(f32),
    #[error("non-finite loss (plus {plus}, minus {minus})")]
    NonFiniteLoss { plus: f64, minus: f64 },
    #[error("gradient ledger is empty")]
    EmptyLedger,
    #[error("seed {seed:?} does not belong to ledger for machine {machine} iteration {iteration} slot {slot}")]
    SeedMismatch {
        seed: PerturbationSeed,
        machine: u64,
        iteration: u64,
        slot: usize,
    },
    #[error("non-finite gradient {value} from machine {machine}")]
    NonFiniteGradient { machine: u64, value: f32 },
    #[error("snapshot taken at iteration {taken} restored at iteration {current}")]
    StaleSnapshot { taken: u64, current: u64 },
    #[error("snapshot holds {expected} parameters, target has {got}")]
    SnapshotShape { expected: usize, got: usize },
}

/// Ledger ordering key: the machine's start timestamp, ties broken by address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MachineKey {
    pub time: u64,
    pub address: String,
}

impl MachineKey {
    pub fn new(time: u64, address: impl Into<String>) -> Self {
        Self {
            time,
            address: address.into(),
        }
    }
}

impl fmt::Display for MachineKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.time, self.address)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGradient {
    pub value: f64,
    pub seed: PerturbationSeed,
    pub epsilon: f32,
}

/// `(L(θ+εz) − L(θ−εz)) / 2ε` with `z` regenerated from `seed`.
///
/// `theta` is perturbed in place by `+ε`, `−2ε`, `+ε`; on return it is within
/// rounding of its input but not necessarily bit-identical. A non-finite loss
/// is reported after the third pass, so `theta` is still restored.
pub fn projected_gradient(
    task: &Task,
    theta: &mut [f32],
    batch: &Batch,
    epsilon: f32,
    seed: PerturbationSeed,
) -> Result<ProjectedGradient, SpsaError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(SpsaError::BadEpsilon(epsilon));
    }
    perturb_parameters(theta, epsilon, &seed)?;
    let plus = task.loss(theta, batch);
    perturb_parameters(theta, -2.0 * epsilon, &seed)?;
    let minus = task.loss(theta, batch);
    perturb_parameters(theta, epsilon, &seed)?;
    let (plus, minus) = (plus?, minus?);
    if !(plus.is_finite() && minus.is_finite()) {
        return Err(SpsaError::NonFiniteLoss { plus, minus });
    }
    Ok(ProjectedGradient {
        value: (plus - minus) / (2.0 * epsilon as f64),
        seed,
        epsilon,
    })
}

/// All projected gradients agreed for one iteration, keyed by machine.
///
/// Slot `k` of machine `m`'s list was produced with seed `(m.time, iteration, k)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientLedger {
    iteration: u64,
    entries: BTreeMap<MachineKey, Vec<f32>>,
}

impl GradientLedger {
    pub fn new(iteration: u64) -> Self {
        Self {
            iteration,
            entries: BTreeMap::new(),
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Replaces `machine`'s gradient list with already-decoded wire values.
    pub fn insert_values(&mut self, machine: MachineKey, values: Vec<f32>) -> Result<(), SpsaError> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(SpsaError::NonFiniteGradient {
                machine: machine.time,
                value: *v,
            });
        }
        self.entries.insert(machine, values);
        Ok(())
    }

    /// Appends one locally computed gradient after checking its seed lines up
    /// with `(machine, iteration, next slot)`.
    pub fn push(&mut self, machine: MachineKey, value: f32, seed: PerturbationSeed) -> Result<(), SpsaError> {
        let slot = self.entries.get(&machine).map_or(0, Vec::len);
        if seed != derive_seed(machine.time, self.iteration, slot as u64) {
            return Err(SpsaError::SeedMismatch {
                seed,
                machine: machine.time,
                iteration: self.iteration,
                slot,
            });
        }
        if !value.is_finite() {
            return Err(SpsaError::NonFiniteGradient {
                machine: machine.time,
                value,
            });
        }
        self.entries.entry(machine).or_default().push(value);
        Ok(())
    }

    pub fn get(&self, machine: &MachineKey) -> Option<&[f32]> {
        self.entries.get(machine).map(Vec::as_slice)
    }

    /// Entries in application order (ascending machine key).
    pub fn iter(&self) -> impl Iterator<Item = (&MachineKey, &[f32])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn machines(&self) -> impl Iterator<Item = &MachineKey> {
        self.entries.keys()
    }

    /// Total number of gradients `N`.
    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// `θ ← θ − (η/N)·g·z(seed)` for every gradient, machines in ascending key
/// order and slots in index order.
pub fn apply_ledger(theta: &mut [f32], ledger: &GradientLedger, eta: f64) -> Result<(), SpsaError> {
    apply_ledger_at(theta, 0, ledger, eta)
}

/// [`apply_ledger`] on the slice of the parameter vector starting at `offset`.
pub fn apply_ledger_at(theta: &mut [f32], offset: usize, ledger: &GradientLedger, eta: f64) -> Result<(), SpsaError> {
    let total = ledger.total();
    if total == 0 {
        return Err(SpsaError::EmptyLedger);
    }
    let scale = eta / total as f64;
    for (machine, grads) in ledger.iter() {
        for (slot, &g) in grads.iter().enumerate() {
            let seed = derive_seed(machine.time, ledger.iteration, slot as u64);
            let coeff = (-(g as f64) * scale) as f32;
            perturb_parameters_at(theta, offset, coeff, &seed)?;
        }
    }
    Ok(())
}

/// `base_eta · √N`; with the `1/N` inside [`apply_ledger`] the net step per
/// perturbation is `base_eta / √N`.
pub fn schedule_eta(base_eta: f64, total_perturbations: usize, _iteration: u64) -> f64 {
    base_eta * (total_perturbations.max(1) as f64).sqrt()
}

/// Learning-rate schedule with an optional exponential half-life decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaSchedule {
    pub base_eta: f64,
    pub half_life: Option<u64>,
}

impl EtaSchedule {
    pub fn constant(base_eta: f64) -> Self {
        Self {
            base_eta,
            half_life: None,
        }
    }

    pub fn eta(&self, total_perturbations: usize, iteration: u64) -> f64 {
        let eta = schedule_eta(self.base_eta, total_perturbations, iteration);
        match self.half_life {
            Some(h) if h > 0 => eta * 0.5f64.powf(iteration as f64 / h as f64),
            _ => eta,
        }
    }
}

/// Bitwise copy of the parameters at the start of an iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    values: ParameterVector,
    iteration: u64,
}

impl Snapshot {
    pub fn capture(theta: &[f32], iteration: u64) -> Self {
        Self {
            values: ParameterVector::new(theta.to_vec()),
            iteration,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn values(&self) -> &ParameterVector {
        &self.values
    }

    pub fn restore(&self, current_iteration: u64) -> Result<ParameterVector, SpsaError> {
        self.check(current_iteration)?;
        Ok(self.values.clone())
    }

    /// Overwrites `theta` without reallocating.
    pub fn restore_into(&self, theta: &mut [f32], current_iteration: u64) -> Result<(), SpsaError> {
        self.check(current_iteration)?;
        if theta.len() != self.values.len() {
            return Err(SpsaError::SnapshotShape {
                expected: self.values.len(),
                got: theta.len(),
            });
        }
        theta.copy_from_slice(&self.values);
        Ok(())
    }

    fn check(&self, current: u64) -> Result<(), SpsaError> {
        if current != self.iteration {
            return Err(SpsaError::StaleSnapshot {
                taken: self.iteration,
                current,
            });
        }
        Ok(())
    }
}
