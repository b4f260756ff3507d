//! Variance schedule for the latent denoiser. Only the cumulative products
//! are kept: the one-step restoration needs nothing else.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_max: usize,
    /// alpha_bar[t] = prod_{s<=t} (1 - beta_s), in (0, 1], non-increasing.
    pub alpha_bar: Vec<f64>,
}

/// Linear beta ramp from `beta_start` to `beta_end` over `t_max` steps.
/// With `t_max` = 1 only `beta_start` is used.
pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Domain("t_max must be at least 1".into()));
    }
    if !(beta_start > 0.0) {
        return Err(Error::Domain(format!(
            "beta_start must be positive, got {beta_start}"
        )));
    }
    if !(beta_end < 1.0) {
        return Err(Error::Domain(format!(
            "beta_end must be below 1, got {beta_end}"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::Domain(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for t in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            t as f64 / (t_max - 1) as f64
        };
        let beta = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { t_max, alpha_bar })
}

impl NoiseSchedule {
    /// The schedule every stage-2 run uses unless overridden.
    pub fn default_schedule() -> NoiseSchedule {
        build_schedule(1000, 0.00085, 0.012).expect("default schedule params are valid")
    }

    /// alpha_bar at a fractional timestep, linear between integer steps.
    /// The differentiable path lives in the tensor op with the same
    /// interpolation; keep the two in sync.
    pub fn alpha_bar_at(&self, tau: f64) -> Result<f64> {
        if !(0.0..=(self.t_max - 1) as f64).contains(&tau) {
            return Err(Error::Domain(format!(
                "tau {tau} outside [0, {}]",
                self.t_max - 1
            )));
        }
        if self.t_max == 1 {
            return Ok(self.alpha_bar[0]);
        }
        let i = (tau.floor() as usize).min(self.t_max - 2);
        let f = tau - i as f64;
        Ok(self.alpha_bar[i] + f * (self.alpha_bar[i + 1] - self.alpha_bar[i]))
    }
}
