//! Minimal differentiable-computation core.
//!
//! There is no general autodiff graph here. Each differentiable piece
//! (MLP layers, reparameterised sampling, the objective terms in
//! [`crate::elbo`]) exposes a forward pass that returns whatever it needs
//! for its own backward pass, and backward passes accumulate (`+=`) into
//! the gradient buffers of a [`ParamStore`].

mod array;
mod gradcheck;
mod mlp;
mod params;
mod rng;

pub use array::NdArray;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use mlp::{Activation, Mlp, MlpCache, MlpSpec};
pub use params::{adam_step, AdamConfig, Param, ParamId, ParamStore};
pub use rng::{reparam_sample, reparam_with_noise, RngState, SeededRng};

/// Bounds applied to log-variances before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[inline]
pub fn clamp_log_var(lv: f64) -> f64 {
    lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Row-wise softmax of a `rows x cols` matrix held in `logits`.
pub fn softmax_rows(logits: &NdArray) -> NdArray {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = NdArray::zeros(&[rows, cols]);
    for r in 0..rows {
        let src = logits.row(r);
        let dst = out.row_mut(r);
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Row-wise log-softmax, exact for entries that underflow in [`softmax_rows`].
pub fn log_softmax_rows(logits: &NdArray) -> NdArray {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = NdArray::zeros(&[rows, cols]);
    for r in 0..rows {
        let src = logits.row(r);
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in out.row_mut(r).iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}
