//! Noise schedule (cumulative alpha products) and the guidance decay factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ᾱ sequence parameterizing the forward noise process and the
/// deterministic denoising update. `alpha_bar[0] = 1` so the final step
/// returns the clean estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a linear-β variance-preserving schedule: β_k linearly spaced
    /// from `beta_min` to `beta_max` over k = 1..T, ᾱ_t = Π (1 − β_k).
    pub fn linear_beta(total_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if total_steps < 1 {
            return Err(Error::config("schedule.total_steps must be >= 1"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::config(format!(
                "schedule betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(total_steps + 1);
        alpha_bar.push(1.0);
        for k in 1..=total_steps {
            let frac = if total_steps == 1 {
                0.0
            } else {
                (k - 1) as f64 / (total_steps - 1) as f64
            };
            let beta = beta_min + frac * (beta_max - beta_min);
            alpha_bar.push(alpha_bar[k - 1] * (1.0 - beta));
        }
        Ok(NoiseSchedule {
            total_steps,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// ᾱ_t for t in 0..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bar_slice(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Per-timestep modulation of the guidance weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// Constant factor 1.
    None,
    /// (1 + cos((T−t)/T · π)) / 2: 1 at t = T, 0 at t = 0.
    ScaledCosine,
}

/// Decay factor in [0, 1] for timestep `t` of a `total`-step run.
pub fn decay_factor(t: usize, total: usize, decay: Decay) -> f64 {
    assert!(t <= total, "timestep {t} out of range 0..={total}");
    match decay {
        Decay::None => 1.0,
        Decay::ScaledCosine => {
            let phase = (total - t) as f64 / total as f64 * std::f64::consts::PI;
            (1.0 + phase.cos()) / 2.0
        }
    }
}
