//! Single-process reference: every machine's gradients for an iteration are
//! computed one after another from the same θ and applied as one ledger.

use onebyte_core::codec::wire_value;
use onebyte_core::params::ParameterVector;
use onebyte_core::spsa::{apply_ledger, GradientLedger, MachineKey};
use onebyte_node::{compute_gradients, RunConfig};

/// θ after `cfg.max_iter` iterations of `machines` (in key order) with no
/// faults. Each machine perturbs its own copy, as a real node would.
pub fn sequential_oracle(cfg: &RunConfig, machines: &[MachineKey]) -> Result<ParameterVector, String> {
    sequential_oracle_with(cfg, machines, |_, _| {})
}

/// Like [`sequential_oracle`], calling `after` with `(t, θ)` once iteration `t` is applied.
pub fn sequential_oracle_with(
    cfg: &RunConfig,
    machines: &[MachineKey],
    mut after: impl FnMut(u64, &ParameterVector),
) -> Result<ParameterVector, String> {
    let task = cfg.build_task().map_err(|e| e.to_string())?;
    let quantizer = cfg.quantizer();
    let eta = cfg.eta_schedule();
    let mut keys = machines.to_vec();
    keys.sort();
    let mut theta = task.init_params(cfg.init_seed);
    for t in 0..cfg.max_iter {
        let mut ledger = GradientLedger::new(t);
        for key in &keys {
            let shard = if cfg.identical_data { 0 } else { key.time };
            let mut own = theta.clone();
            let grads = compute_gradients(&task, &mut own, cfg, shard, key.time, t, |_| {}).map_err(|e| e.to_string())?;
            let values = grads
                .iter()
                .map(|g| wire_value(*g, quantizer.as_ref()))
                .collect::<Result<Vec<f32>, _>>()
                .map_err(|e| e.to_string())?;
            if !values.is_empty() {
                ledger.insert_values(key.clone(), values).map_err(|e| e.to_string())?;
            }
        }
        if !ledger.is_empty() {
            apply_ledger(&mut theta, &ledger, eta.eta(ledger.total(), t)).map_err(|e| e.to_string())?;
        }
        after(t, &theta);
    }
    Ok(theta)
}

/// Held-out loss before training and after each iteration of one machine
/// training alone.
pub fn single_node_losses(cfg: &RunConfig, machine_time: u64) -> Result<Vec<f64>, String> {
    let task = cfg.build_task().map_err(|e| e.to_string())?;
    let eval = task.eval_batch();
    let mut losses = vec![task.loss(&task.init_params(cfg.init_seed), &eval).map_err(|e| e.to_string())?];
    let mut failure = None;
    sequential_oracle_with(cfg, &[MachineKey::new(machine_time, "solo")], |_, theta| match task.loss(theta, &eval) {
        Ok(l) => losses.push(l),
        Err(e) => failure = Some(e.to_string()),
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(losses),
    }
}
