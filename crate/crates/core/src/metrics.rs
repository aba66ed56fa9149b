//! Scalar measurements on consensus iterates.

use serde::{Deserialize, Serialize};

use crate::error::{ConsensusError, Result};

pub fn data_average(r: &[f64]) -> Result<f64> {
    if r.is_empty() {
        return Err(ConsensusError::param("data average of an empty vector"));
    }
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// `||xq - 1 x_avg||_2 / sqrt(N)`; equals the consensus error once all entries agree.
pub fn iterative_error(xq: &[f64], x_avg: f64) -> f64 {
    let ss: f64 = xq.iter().map(|v| (v - x_avg) * (v - x_avg)).sum();
    (ss / xq.len() as f64).sqrt()
}

/// Worst-case consensus error of the deterministically quantized iteration,
/// `(1/2 + rho 2E/N) delta`.
pub fn error_bound(rho: f64, e: usize, n: usize, delta: f64) -> f64 {
    (0.5 + rho * 2.0 * e as f64 / n as f64) * delta
}

/// Block-diagonal weight `diag(rho I, I / rho)` on `u = [z; beta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GMetric {
    pub rho: f64,
    /// Length of each of `z` and `beta` (the arc count `2E`).
    pub dimension: usize,
}

/// `rho ||z||^2 + ||beta||^2 / rho` for `u = [z; beta]`.
pub fn g_norm_sq(u: &[f64], gm: &GMetric) -> Result<f64> {
    if u.len() != 2 * gm.dimension {
        return Err(ConsensusError::param(format!(
            "G-norm expects a vector of length {}, got {}",
            2 * gm.dimension,
            u.len()
        )));
    }
    let (z, beta) = u.split_at(gm.dimension);
    let zz: f64 = z.iter().map(|v| v * v).sum();
    let bb: f64 = beta.iter().map(|v| v * v).sum();
    Ok(gm.rho * zz + bb / gm.rho)
}

/// `f(x) = ||x - r||^2 / 2`.
pub fn objective_value(x: &[f64], r: &[f64]) -> Result<f64> {
    if x.len() != r.len() {
        return Err(ConsensusError::param(format!(
            "objective: x has {} entries, r has {}",
            x.len(),
            r.len()
        )));
    }
    Ok(0.5 * x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Mean and unbiased sample variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}
