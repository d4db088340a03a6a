//! Covariance and direction parsing for the `privacy` subcommand.

use nalgebra::DMatrix;
use onebyte_core::privacy::{GaussianPrior, PrivacyError};
use onebyte_core::rng::GaussianStream;

/// `identity`, `diag:a,b,...` or a path to a whitespace-separated k×k matrix.
pub fn parse_prior(spec: &str, k: usize) -> Result<GaussianPrior, String> {
    if spec == "identity" {
        return Ok(GaussianPrior::isotropic(k));
    }
    if let Some(list) = spec.strip_prefix("diag:") {
        let v: Vec<f64> = list
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x}: {e}")))
            .collect::<Result<_, _>>()?;
        if v.len() != k {
            return Err(format!("diag has {} entries, expected {k}", v.len()));
        }
        return GaussianPrior::diagonal(&v).map_err(|e| e.to_string());
    }
    let text = std::fs::read_to_string(spec).map_err(|e| format!("{spec}: {e}"))?;
    parse_matrix(&text, k).and_then(|m| GaussianPrior::new(vec![0.0; k], m).map_err(|e: PrivacyError| e.to_string()))
}

pub fn parse_matrix(text: &str, k: usize) -> Result<DMatrix<f64>, String> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|x| x.parse::<f64>().map_err(|e| format!("{x}: {e}")))
        .collect::<Result<_, _>>()?;
    if vals.len() != k * k {
        return Err(format!("matrix has {} entries, expected {}", vals.len(), k * k));
    }
    Ok(DMatrix::from_row_slice(k, k, &vals))
}

/// `e<i>` (1-based axis), `uniform` (all components equal) or `random[:seed]`.
pub fn parse_direction(spec: &str, k: usize) -> Result<Vec<f64>, String> {
    let mut v = vec![0.0; k];
    if let Some(i) = spec.strip_prefix('e') {
        let i: usize = i.parse().map_err(|_| format!("bad axis {spec}"))?;
        if i == 0 || i > k {
            return Err(format!("axis {i} outside 1..={k}"));
        }
        v[i - 1] = 1.0;
        return Ok(v);
    }
    if spec == "uniform" {
        return Ok(vec![1.0 / (k as f64).sqrt(); k]);
    }
    if let Some(rest) = spec.strip_prefix("random") {
        let seed = rest.strip_prefix(':').map_or(Ok(7), |s| s.parse::<u64>()).map_err(|_| format!("bad seed in {spec}"))?;
        let mut z = GaussianStream::new(seed);
        for x in v.iter_mut() {
            *x = z.next_normal();
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        return Ok(v.into_iter().map(|x| x / norm).collect());
    }
    Err(format!("unknown direction {spec}"))
}
