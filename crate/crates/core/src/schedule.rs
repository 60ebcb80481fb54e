//! Linear noise schedule and the per-step coefficients derived from it.
//!
//! Storage is 0-based; every public accessor takes a 1-based step `t` in
//! `1..=T` and reads index `t - 1`. The convention `alpha_bar_0 = 1` is used
//! wherever a step-`t-1` quantity is needed at `t = 1`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Floor applied to the posterior variance before taking its logarithm.
pub const POSTERIOR_VARIANCE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Multiply both endpoints by `1000 / T` when `T < 1000`.
    pub scale_endpoints: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            scale_endpoints: true,
        }
    }
}

impl ScheduleConfig {
    /// Endpoints actually handed to [`NoiseSchedule::linear`].
    pub fn effective_endpoints(&self) -> (f64, f64) {
        if self.scale_endpoints && self.steps > 0 && self.steps < 1000 {
            let scale = 1000.0 / self.steps as f64;
            (self.beta_start * scale, self.beta_end * scale)
        } else {
            (self.beta_start, self.beta_end)
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        let (start, end) = self.effective_endpoints();
        NoiseSchedule::linear(self.steps, start, end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_beta_tilde: Vec<f64>,
}

/// Everything the forward and reverse processes need at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub t: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    pub sqrt_alpha_bar: f64,
    pub sqrt_one_minus_alpha_bar: f64,
    pub recip_sqrt_alpha: f64,
    /// `(1 - alpha_t) / sqrt(1 - alpha_bar_t)`, the weight on the predicted noise.
    pub eps_coef: f64,
    pub beta_tilde: f64,
    /// `ln` of the posterior variance used as the lower end of the learned
    /// variance range. At `t = 1` the zero posterior variance is replaced by
    /// the step-2 value (or the floor for single-step schedules).
    pub log_beta_tilde_clipped: f64,
    /// Posterior mean weights: `mu = posterior_x0_coef * x0 + posterior_xt_coef * x_t`.
    pub posterior_x0_coef: f64,
    pub posterior_xt_coef: f64,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) {
            return Err(Error::Config(format!(
                "beta endpoints must lie in (0, 1), got {beta_start} and {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::Config(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }

        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps)
                .map(|i| {
                    if i == steps - 1 {
                        beta_end
                    } else {
                        beta_start + step * i as f64
                    }
                })
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let posterior_beta_tilde = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();

        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            posterior_beta_tilde,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_beta_tilde(&self) -> &[f64] {
        &self.posterior_beta_tilde
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn coefficients_at(&self, t: usize) -> Result<StepCoefficients> {
        self.check_step(t)?;
        let i = t - 1;
        let beta = self.beta[i];
        let alpha = self.alpha[i];
        let alpha_bar = self.alpha_bar[i];
        let alpha_bar_prev = if i == 0 { 1.0 } else { self.alpha_bar[i - 1] };
        let beta_tilde = self.posterior_beta_tilde[i];
        let clipped = if i == 0 && self.steps() > 1 {
            self.posterior_beta_tilde[1]
        } else {
            beta_tilde
        };
        Ok(StepCoefficients {
            t,
            beta,
            alpha,
            alpha_bar,
            alpha_bar_prev,
            sqrt_alpha_bar: alpha_bar.sqrt(),
            sqrt_one_minus_alpha_bar: (1.0 - alpha_bar).sqrt(),
            recip_sqrt_alpha: 1.0 / alpha.sqrt(),
            eps_coef: (1.0 - alpha) / (1.0 - alpha_bar).sqrt(),
            beta_tilde,
            log_beta_tilde_clipped: clipped.max(POSTERIOR_VARIANCE_FLOOR).ln(),
            posterior_x0_coef: alpha_bar_prev.sqrt() * beta / (1.0 - alpha_bar),
            posterior_xt_coef: alpha.sqrt() * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar),
        })
    }

    /// Hex SHA-256 over the little-endian beta sequence.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for b in &self.beta {
            hasher.update(b.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}
