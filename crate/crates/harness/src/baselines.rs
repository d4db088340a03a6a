//! Communication cost of fine-tuning schemes across `m` machines.
//!
//! Counting convention: sender-side payload bytes summed over all machines,
//! with no framing overhead. `steps` are per-machine gradient steps, so the
//! run computes `m · steps` gradients in total.
//!
//! - full gradient: every step, each machine sends its d-parameter gradient
//!   to the other m−1 machines;
//! - model averaging: after every `accumulation` gradients (counted across
//!   all machines) each machine sends its parameters to the other m−1;
//! - low-rank adapter: full-gradient exchange restricted to the adapter's
//!   parameters (rank r on `matrices` square `hidden`×`hidden` projections per layer);
//! - one-byte: each machine sends its `n` one-byte projected gradients per
//!   step to the other m−1.

use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    FullGradient,
    ModelAveraging { accumulation: u64 },
    LowRankAdapter { rank: u64, layers: u64, hidden: u64, matrices: u64 },
    OneByte { n_inferences: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineModel {
    pub scheme: Scheme,
    pub params: u64,
    pub bytes_per_param: u64,
    pub machines: u64,
    pub steps: u64,
}

impl BaselineModel {
    /// Parameters whose gradients or values are exchanged.
    pub fn exchanged_params(&self) -> u64 {
        match self.scheme {
            Scheme::LowRankAdapter {
                rank,
                layers,
                hidden,
                matrices,
            } => layers * matrices * rank * 2 * hidden,
            _ => self.params,
        }
    }

    pub fn bytes(&self) -> u128 {
        let m = self.machines as u128;
        let pairs = m * (m.saturating_sub(1));
        let p = self.exchanged_params() as u128 * self.bytes_per_param as u128;
        match self.scheme {
            Scheme::FullGradient | Scheme::LowRankAdapter { .. } => pairs * p * self.steps as u128,
            Scheme::ModelAveraging { accumulation } => {
                let rounds = (m * self.steps as u128).div_ceil(accumulation.max(1) as u128);
                pairs * p * rounds
            }
            Scheme::OneByte { n_inferences } => pairs * n_inferences as u128 * self.steps as u128,
        }
    }

    pub fn label(&self) -> String {
        match self.scheme {
            Scheme::FullGradient => "full gradient, all-to-all".into(),
            Scheme::ModelAveraging { accumulation } => format!("model averaging every {accumulation} gradients"),
            Scheme::LowRankAdapter { rank, .. } => format!("low-rank adapter gradients (r = {rank})"),
            Scheme::OneByte { n_inferences } => format!("one-byte projected gradients (n = {n_inferences})"),
        }
    }
}

pub fn baseline_bytes(model: &BaselineModel) -> u128 {
    model.bytes()
}

/// A 6.7B-parameter decoder in 16-bit precision fine-tuned on four machines
/// with 6,400 backpropagation gradients (1,600 per machine), against
/// 16,000 forward-only steps of 16 projected gradients per machine.
pub fn reference_models() -> Vec<BaselineModel> {
    let base = BaselineModel {
        scheme: Scheme::FullGradient,
        params: 6_700_000_000,
        bytes_per_param: 2,
        machines: 4,
        steps: 1_600,
    };
    vec![
        base,
        BaselineModel {
            scheme: Scheme::ModelAveraging { accumulation: 64 },
            ..base
        },
        BaselineModel {
            scheme: Scheme::LowRankAdapter {
                rank: 8,
                layers: 32,
                hidden: 4096,
                matrices: 2,
            },
            ..base
        },
        BaselineModel {
            scheme: Scheme::OneByte { n_inferences: 16 },
            steps: 16_000 / 4,
            bytes_per_param: 1,
            ..base
        },
    ]
}

pub fn human_bytes(b: u128) -> String {
    const UNITS: [&str; 6] = ["B", "kB", "MB", "GB", "TB", "PB"];
    let mut v = b as f64;
    let mut u = 0;
    while v >= 1000.0 && u + 1 < UNITS.len() {
        v /= 1000.0;
        u += 1;
    }
    if u == 0 {
        format!("{b} B")
    } else {
        format!("{v:.2} {}", UNITS[u])
    }
}

/// The comparison table with every assumption spelled out.
pub fn render_table(models: &[BaselineModel]) -> String {
    let mut out = String::new();
    writeln!(out, "counting: sender-side payload bytes summed over machines, no framing").unwrap();
    writeln!(out, "{:<46} {:>14} {:>9} {:>6} {:>8} {:>22} {:>10}", "scheme", "exchanged", "B/param", "m", "steps", "bytes", "human").unwrap();
    for m in models {
        writeln!(
            out,
            "{:<46} {:>14} {:>9} {:>6} {:>8} {:>22} {:>10}",
            m.label(),
            m.exchanged_params(),
            m.bytes_per_param,
            m.machines,
            m.steps,
            m.bytes(),
            human_bytes(m.bytes())
        )
        .unwrap();
    }
    out
}
