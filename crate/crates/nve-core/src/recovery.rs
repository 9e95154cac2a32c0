//! Top-k ranking recovery bound and its inversion to a prompt count.
//!
//! Failure probability of the empirical top-k set differing from the
//! population top-k set: min(1, 2·k·(L−k)·exp(−N·Δ²/(8σ²))). Inverting for
//! the smallest N meeting a target gives N = ceil(8σ²/Δ² · ln(2k(L−k)/t)).

use serde::{Deserialize, Serialize};

use crate::error::{NveError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecoveryParams {
    /// Layer count.
    pub layers: usize,
    /// Top-k size, 1 <= k < layers.
    pub k: usize,
    /// Gap between the k-th and (k+1)-th population scores, in score units.
    pub delta: f64,
    /// Sub-Gaussian parameter of per-prompt scores, in score units.
    pub sigma: f64,
    /// Calibration prompt count.
    pub prompts: u64,
}

impl RecoveryParams {
    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k >= self.layers {
            return Err(NveError::InvalidParameter(format!(
                "k = {} must satisfy 1 <= k < L = {}",
                self.k, self.layers
            )));
        }
        if self.delta <= 0.0 || !self.delta.is_finite() {
            return Err(NveError::InvalidParameter(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        if self.sigma <= 0.0 || !self.sigma.is_finite() {
            return Err(NveError::InvalidParameter(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Upper bound on the probability of top-k recovery failure, clamped to [0, 1].
pub fn failure_bound(p: &RecoveryParams) -> Result<f64> {
    p.validate()?;
    let pairs = 2.0 * p.k as f64 * (p.layers - p.k) as f64;
    let exponent = -(p.prompts as f64) * p.delta * p.delta / (8.0 * p.sigma * p.sigma);
    Ok((pairs * exponent.exp()).min(1.0))
}

/// Smallest prompt count N with failure_bound(N) <= target_prob.
pub fn min_prompts(
    layers: usize,
    k: usize,
    delta: f64,
    sigma: f64,
    target_prob: f64,
) -> Result<u64> {
    if !(target_prob > 0.0 && target_prob < 1.0) {
        return Err(NveError::InvalidParameter(format!(
            "target probability must be in (0, 1), got {target_prob}"
        )));
    }
    let params = RecoveryParams {
        layers,
        k,
        delta,
        sigma,
        prompts: 0,
    };
    params.validate()?;
    let pairs = 2.0 * k as f64 * (layers - k) as f64;
    if pairs <= target_prob {
        return Ok(0); // vacuously satisfied before any sampling
    }
    let n = (8.0 * sigma * sigma / (delta * delta)) * (pairs / target_prob).ln();
    let mut candidate = n.ceil().max(0.0) as u64;
    // Guard the ceiling against float rounding at the boundary.
    while candidate > 0 {
        let b = failure_bound(&RecoveryParams {
            prompts: candidate - 1,
            ..params
        })?;
        if b > target_prob {
            break;
        }
        candidate -= 1;
    }
    loop {
        let b = failure_bound(&RecoveryParams {
            prompts: candidate,
            ..params
        })?;
        if b <= target_prob {
            return Ok(candidate);
        }
        candidate += 1;
    }
}

/// Conservative sub-Gaussian parameter estimate from a profiling run:
/// per-layer sample standard deviation of per-prompt statistics, maximum
/// over layers.
pub fn estimate_sigma(per_prompt_layer_means: &[Vec<f64>]) -> Result<f64> {
    let mut max_sd = 0.0f64;
    for per_prompt in per_prompt_layer_means {
        let n = per_prompt.len();
        if n < 2 {
            return Err(NveError::InvalidParameter(
                "sigma estimation needs at least 2 prompts".into(),
            ));
        }
        let mean = per_prompt.iter().sum::<f64>() / n as f64;
        let var = per_prompt.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / (n as f64 - 1.0);
        max_sd = max_sd.max(var.sqrt());
    }
    Ok(max_sd)
}
