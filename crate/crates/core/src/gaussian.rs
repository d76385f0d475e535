//! Diagonal-Gaussian latent math.
//!
//! Posteriors are parameterized by mean and log-variance. The KL divergence is
//! the general two-Gaussian closed form, so comparing two learned posteriors
//! and comparing a posterior with the standard normal prior use the same code.

use crate::error::{ensure_len, Error, Result};
use crate::scalar::{compensated_sum, Scalar};

/// Lower bound applied to log-variance entries.
pub const LOG_VAR_MIN: f64 = -10.0;
/// Upper bound applied to log-variance entries.
pub const LOG_VAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian<S: Scalar = f64> {
    mean: Vec<S>,
    log_var: Vec<S>,
}

impl<S: Scalar> DiagonalGaussian<S> {
    /// Builds a Gaussian, clamping `log_var` into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<S>, log_var: Vec<S>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("gaussian dimension must be at least 1"));
        }
        ensure_len("log_var", log_var.len(), mean.len())?;
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian parameters must be finite"));
        }
        let lo = S::from_f64(LOG_VAR_MIN);
        let hi = S::from_f64(LOG_VAR_MAX);
        let log_var = log_var.into_iter().map(|v| v.max(lo).min(hi)).collect();
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![S::ZERO; dim], vec![S::ZERO; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn log_var(&self) -> &[S] {
        &self.log_var
    }

    pub fn variance(&self) -> impl Iterator<Item = S> + '_ {
        self.log_var.iter().map(|lv| lv.exp())
    }
}

/// `KL[q || p]` for diagonal Gaussians, in nats.
pub fn kl_divergence<S: Scalar>(q: &DiagonalGaussian<S>, p: &DiagonalGaussian<S>) -> Result<S> {
    ensure_len("kl_divergence: p dimension", p.dim(), q.dim())?;
    Ok(kl_terms(&q.mean, &q.log_var, &p.mean, &p.log_var))
}

/// Returns `mean + exp(log_var / 2) * noise`.
pub fn reparameterized_sample<S: Scalar>(g: &DiagonalGaussian<S>, noise: &[S]) -> Result<Vec<S>> {
    ensure_len("reparameterized_sample: noise", noise.len(), g.dim())?;
    let half = S::from_f64(0.5);
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect())
}

/// Log probability density of `x` under `g`.
pub fn log_density<S: Scalar>(x: &[S], g: &DiagonalGaussian<S>) -> Result<S> {
    ensure_len("log_density: x", x.len(), g.dim())?;
    let half = S::from_f64(0.5);
    let ln2pi = S::from_f64(LN_2PI);
    Ok(x.iter()
        .zip(&g.mean)
        .zip(&g.log_var)
        .map(|((&xi, &m), &lv)| {
            let d = xi - m;
            -half * (ln2pi + lv + d * d / lv.exp())
        })
        .sum())
}

/// Closed-form KL over raw parameter slices. Lengths must agree.
pub(crate) fn kl_terms<S: Scalar>(mq: &[S], lq: &[S], mp: &[S], lp: &[S]) -> S {
    let half = S::from_f64(0.5);
    compensated_sum((0..mq.len()).map(|d| {
        let diff = mq[d] - mp[d];
        half * (lp[d] - lq[d]) + (lq[d].exp() + diff * diff) / (S::from_f64(2.0) * lp[d].exp()) - half
    }))
}

/// Accumulates `scale * dKL/d(param)` into the four gradient slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn kl_backward<S: Scalar>(
    mq: &[S], lq: &[S], mp: &[S], lp: &[S],
    scale: S,
    dmq: &mut [S], dlq: &mut [S], dmp: &mut [S], dlp: &mut [S],
) {
    let half = S::from_f64(0.5);
    for d in 0..mq.len() {
        let inv_vp = (-lp[d]).exp();
        let vq = lq[d].exp();
        let diff = mq[d] - mp[d];
        let g_mean = diff * inv_vp;
        dmq[d] += scale * g_mean;
        dmp[d] -= scale * g_mean;
        dlq[d] += scale * (half * vq * inv_vp - half);
        dlp[d] += scale * (half - half * (vq + diff * diff) * inv_vp);
    }
}
