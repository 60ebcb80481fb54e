//! Forward noising, the reverse sampling step and the loss terms.
//!
//! Everything here is a pure function of arrays: noise is always passed in
//! by the caller. Masks live in `[-1, 1]` while they diffuse; see
//! [`mask_to_signed`] and [`signed_to_unit`] for the mapping to and from the
//! `{0, 1}` label domain. The [`graph`] submodule carries the same maths on
//! autograd tensors for training.

pub mod graph;

use std::f64::consts::LN_2;

use ndarray::{concatenate, Array3, ArrayView3, Axis, Zip};

use crate::error::{check_shape, Error, Result};
use crate::schedule::NoiseSchedule;

/// The image prior `b` stacked with the noisy mask `x_{b,t}` at step `t`.
#[derive(Debug, Clone)]
pub struct ConditionedState {
    prior: Array3<f64>,
    noisy_mask: Array3<f64>,
    t: usize,
}

impl ConditionedState {
    pub fn new(prior: Array3<f64>, noisy_mask: Array3<f64>, t: usize) -> Result<Self> {
        let (_, h, w) = prior.dim();
        check_shape(&[1, h, w], noisy_mask.shape())?;
        if prior.dim().0 == 0 {
            return Err(Error::Data("prior needs at least one channel".into()));
        }
        Ok(ConditionedState { prior, noisy_mask, t })
    }

    pub fn prior(&self) -> &Array3<f64> {
        &self.prior
    }

    pub fn noisy_mask(&self) -> &Array3<f64> {
        &self.noisy_mask
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// `X_t = b ⊕ x_{b,t}`, mask channel last.
    pub fn stacked(&self) -> Array3<f64> {
        concatenate(Axis(0), &[self.prior.view(), self.noisy_mask.view()]).expect("shapes checked at construction")
    }

    /// Advance to step `t - 1` with a new noisy mask; the prior is moved, not copied.
    pub fn advance(self, noisy_mask: Array3<f64>) -> Result<Self> {
        check_shape(self.noisy_mask.shape(), noisy_mask.shape())?;
        Ok(ConditionedState {
            prior: self.prior,
            noisy_mask,
            t: self.t.saturating_sub(1),
        })
    }
}

/// Network output for one image: predicted noise and the variance
/// interpolation coefficient `v` (already mapped into `[0, 1]`).
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_hat: Array3<f64>,
    pub v: Array3<f64>,
}

impl DenoiserOutput {
    pub fn new(eps_hat: Array3<f64>, v: Array3<f64>) -> Result<Self> {
        check_shape(eps_hat.shape(), v.shape())?;
        if eps_hat.dim().0 != 1 {
            return Err(Error::Shape {
                expected: vec![1, eps_hat.dim().1, eps_hat.dim().2],
                actual: eps_hat.shape().to_vec(),
            });
        }
        Ok(DenoiserOutput { eps_hat, v })
    }
}

/// `{0, 1}` label → `{-1, +1}` diffusion domain.
pub fn mask_to_signed(mask: ArrayView3<'_, f64>) -> Array3<f64> {
    mask.mapv(|m| 2.0 * m - 1.0)
}

/// Inverse of [`mask_to_signed`], clipped to `[0, 1]`.
pub fn signed_to_unit(x: ArrayView3<'_, f64>) -> Array3<f64> {
    x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(
    x0: ArrayView3<'_, f64>,
    t: usize,
    eps: ArrayView3<'_, f64>,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    check_shape(x0.shape(), eps.shape())?;
    let c = schedule.coefficients_at(t)?;
    Ok(Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| c.sqrt_alpha_bar * x + c.sqrt_one_minus_alpha_bar * e))
}

/// Per-pixel learned variance: `exp(v ln beta_t + (1 - v) ln beta_tilde_t)`.
pub fn sigma_squared(v: ArrayView3<'_, f64>, t: usize, schedule: &NoiseSchedule) -> Result<Array3<f64>> {
    let c = schedule.coefficients_at(t)?;
    let log_beta = c.beta.ln();
    Ok(v.mapv(|v| (v * log_beta + (1.0 - v) * c.log_beta_tilde_clipped).exp()))
}

/// Mean of `p_theta(x_{t-1} | x_t)` from the noise prediction.
pub fn model_mean(
    x_t: ArrayView3<'_, f64>,
    eps_hat: ArrayView3<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    check_shape(x_t.shape(), eps_hat.shape())?;
    let c = schedule.coefficients_at(t)?;
    Ok(Zip::from(&x_t)
        .and(&eps_hat)
        .map_collect(|&x, &e| c.recip_sqrt_alpha * (x - c.eps_coef * e)))
}

/// One ancestral step `x_{b,t} → x_{b,t-1}`; `z` is the injected noise
/// (callers pass zeros for the final step).
pub fn reverse_step(
    state: &ConditionedState,
    out: &DenoiserOutput,
    z: ArrayView3<'_, f64>,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    let x_t = state.noisy_mask().view();
    check_shape(x_t.shape(), out.eps_hat.shape())?;
    check_shape(x_t.shape(), z.shape())?;
    let t = state.t();
    let mean = model_mean(x_t, out.eps_hat.view(), t, schedule)?;
    let var = sigma_squared(out.v.view(), t, schedule)?;
    Ok(Zip::from(&mean)
        .and(&var)
        .and(&z)
        .map_collect(|&m, &s2, &z| m + s2.sqrt() * z))
}

/// Mean squared error over all elements.
pub fn simple_loss(eps: ArrayView3<'_, f64>, eps_hat: ArrayView3<'_, f64>) -> Result<f64> {
    check_shape(eps.shape(), eps_hat.shape())?;
    let n = eps.len() as f64;
    Ok(Zip::from(&eps)
        .and(&eps_hat)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        / n)
}

/// Mean and log-variance of `q(x_{t-1} | x_t, x0)`.
pub fn posterior(
    x0: ArrayView3<'_, f64>,
    x_t: ArrayView3<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Array3<f64>, f64)> {
    check_shape(x0.shape(), x_t.shape())?;
    let c = schedule.coefficients_at(t)?;
    let mean = Zip::from(&x0)
        .and(&x_t)
        .map_collect(|&a, &b| c.posterior_x0_coef * a + c.posterior_xt_coef * b);
    Ok((mean, c.log_beta_tilde_clipped))
}

/// Elementwise KL between two diagonal Gaussians given by mean and log-variance, in nats.
pub fn gaussian_kl(mean_q: f64, log_var_q: f64, mean_p: f64, log_var_p: f64) -> f64 {
    0.5 * (-1.0 + log_var_p - log_var_q
        + (log_var_q - log_var_p).exp()
        + (mean_q - mean_p).powi(2) * (-log_var_p).exp())
}

/// Per-pixel mean KL (in bits) between the analytic posterior and the model's
/// reverse transition. The model mean comes from `out.eps_hat`; during training
/// the graph version detaches it so this term only shapes the variance.
pub fn vlb_term(
    x0: ArrayView3<'_, f64>,
    x_t: ArrayView3<'_, f64>,
    t: usize,
    out: &DenoiserOutput,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_shape(x0.shape(), out.eps_hat.shape())?;
    let (mean_q, log_var_q) = posterior(x0, x_t, t, schedule)?;
    let mean_p = model_mean(x_t, out.eps_hat.view(), t, schedule)?;
    let var_p = sigma_squared(out.v.view(), t, schedule)?;
    let n = x0.len() as f64;
    let total = Zip::from(&mean_q)
        .and(&mean_p)
        .and(&var_p)
        .fold(0.0, |acc, &mq, &mp, &vp| acc + gaussian_kl(mq, log_var_q, mp, vp.ln()));
    Ok(total / n / LN_2)
}

pub fn hybrid_loss(simple: f64, vlb: f64, lambda: f64) -> f64 {
    simple + lambda * vlb
}
