//! Tensor versions of the noising and loss maths, for use under autograd.
//! Batched tensors are `(B, 1, H, W)`; each batch item carries its own step.

use std::f64::consts::LN_2;

use tch::Tensor;

use crate::error::Result;
use crate::schedule::{NoiseSchedule, StepCoefficients};

/// Per-item coefficient broadcast as a `(B, 1, 1, 1)` float tensor.
pub fn coefficient_column(
    schedule: &NoiseSchedule,
    steps: &[usize],
    pick: impl Fn(&StepCoefficients) -> f64,
) -> Result<Tensor> {
    let values = steps
        .iter()
        .map(|&t| schedule.coefficients_at(t).map(|c| pick(&c) as f32))
        .collect::<Result<Vec<f32>>>()?;
    Ok(Tensor::from_slice(&values).view([steps.len() as i64, 1, 1, 1]))
}

pub fn noise_masks(x0: &Tensor, steps: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let a = coefficient_column(schedule, steps, |c| c.sqrt_alpha_bar)?;
    let b = coefficient_column(schedule, steps, |c| c.sqrt_one_minus_alpha_bar)?;
    Ok(x0 * a + eps * b)
}

pub fn mse(eps: &Tensor, eps_hat: &Tensor) -> Tensor {
    let d = (eps_hat - eps).square();
    d.mean(d.kind())
}

/// Raw network output → `v` in `[0, 1]`.
pub fn map_variance(raw: &Tensor) -> Tensor {
    ((raw + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Batch mean of the per-pixel KL (bits) between posterior and model.
/// Pass a detached `eps_hat` to train only the variance.
pub fn vlb(
    x0: &Tensor,
    x_t: &Tensor,
    steps: &[usize],
    eps_hat: &Tensor,
    v: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let col = |f: fn(&StepCoefficients) -> f64| coefficient_column(schedule, steps, f);
    let mean_q = x0 * col(|c| c.posterior_x0_coef)? + x_t * col(|c| c.posterior_xt_coef)?;
    let log_var_q = col(|c| c.log_beta_tilde_clipped)?;
    let mean_p = (x_t - eps_hat * col(|c| c.eps_coef)?) * col(|c| c.recip_sqrt_alpha)?;
    let log_beta = col(|c| c.beta.ln())?;
    let log_var_p = v * &log_beta + (1.0 - v) * &log_var_q;
    let kl = ((&log_var_p - &log_var_q)
        + (&log_var_q - &log_var_p).exp()
        + (mean_q - mean_p).square() * (-&log_var_p).exp()
        - 1.0)
        * 0.5;
    Ok(kl.mean(kl.kind()) / LN_2)
}
