//! Weighted outcome estimates with linearized standard errors.

use serde::Serialize;

use crate::error::{KpopError, Result};

pub const Z_95: f64 = 1.959964;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateResult {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_effective: f64,
}

/// `Σ wᵢyᵢ` with `se² = n/(n−1) · Σ wᵢ²(yᵢ − μ̂)²`, treating `w` as sampling
/// weights under a single-stage with-replacement design.
pub fn weighted_mean(y: &[f64], w: &[f64]) -> Result<EstimateResult> {
    if y.len() != w.len() {
        return Err(KpopError::DimensionMismatch(format!(
            "{} outcomes for {} weights",
            y.len(),
            w.len()
        )));
    }
    let n = y.len();
    if n < 2 {
        return Err(KpopError::TooFewRows { which: "sample", found: n });
    }
    if y.iter().chain(w).any(|v| !v.is_finite()) {
        return Err(KpopError::NonFinite("outcome or weights"));
    }
    let total: f64 = w.iter().sum();
    let mu = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    let ss: f64 = y
        .iter()
        .zip(w)
        .map(|(yi, wi)| {
            let wn = wi / total;
            wn * wn * (yi - mu) * (yi - mu)
        })
        .sum();
    let se = (n as f64 / (n as f64 - 1.0) * ss).sqrt();
    let n_effective = total * total / w.iter().map(|x| x * x).sum::<f64>();
    Ok(EstimateResult {
        estimate: mu,
        se,
        ci_low: mu - Z_95 * se,
        ci_high: mu + Z_95 * se,
        n_effective,
    })
}

/// Weighted mean of `p_d − p_r` in percentage points.
pub fn margin_estimate(p_d: &[f64], p_r: &[f64], w: &[f64]) -> Result<EstimateResult> {
    if p_d.len() != p_r.len() {
        return Err(KpopError::DimensionMismatch(format!(
            "{} vs {} vote shares",
            p_d.len(),
            p_r.len()
        )));
    }
    let diff: Vec<f64> = p_d.iter().zip(p_r).map(|(d, r)| 100.0 * (d - r)).collect();
    weighted_mean(&diff, w)
}
