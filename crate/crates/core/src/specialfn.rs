//! Special functions and closed-form log-densities.
//!
//! All functions return [`Error::Domain`] on arguments outside their
//! support instead of producing NaN.

use std::f64::consts::PI;

use crate::diffcore::{sigmoid, softplus};
use crate::error::{Error, Result};

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Probabilities below this are treated as exact zeros in entropies.
pub const PROB_FLOOR: f64 = 1e-12;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Parameters of a zero-inflated negative binomial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZinbParams {
    pub mu: f64,
    pub inv_dispersion: f64,
    pub dropout_prob: f64,
}

impl ZinbParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(self.inv_dispersion > 0.0) || !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::domain("zinb", format!("invalid parameters {self:?}")));
        }
        Ok(())
    }
}

fn ln_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        (PI / (PI * x).sin()).ln() - ln_gamma_unchecked(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = LANCZOS_COEF[0];
        let t = x + LANCZOS_G + 0.5;
        for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        LN_SQRT_2PI + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine coefficients).
pub fn log_gamma_fn(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain("log_gamma", format!("x = {x} must be positive and finite")));
    }
    Ok(ln_gamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// Digamma `ψ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain("digamma", format!("x = {x} must be positive and finite")));
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0))))
}

/// Trigamma `ψ'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain("trigamma", format!("x = {x} must be positive and finite")));
    }
    Ok(trigamma_unchecked(x))
}

fn check_positive(func: &'static str, v: &[f64]) -> Result<()> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, &x)| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::domain(func, format!("entry {i} = {x} must be positive")));
    }
    Ok(())
}

/// `ln B(α) = Σ_k ln Γ(α_k) − ln Γ(Σ_k α_k)`.
pub fn log_multivariate_beta(alpha: &[f64]) -> Result<f64> {
    check_positive("log_multivariate_beta", alpha)?;
    let sum: f64 = alpha.iter().sum();
    Ok(alpha.iter().map(|&a| ln_gamma_unchecked(a)).sum::<f64>() - ln_gamma_unchecked(sum))
}

pub fn gaussian_logpdf(y: f64, mean: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::domain("gaussian_logpdf", format!("variance = {variance}")));
    }
    let r = y - mean;
    Ok(-LN_SQRT_2PI - 0.5 * variance.ln() - r * r / (2.0 * variance))
}

/// Gamma log-density with shape/rate parameterisation.
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> Result<f64> {
    if !(x > 0.0) || !(shape > 0.0) || !(rate > 0.0) {
        return Err(Error::domain(
            "gamma_logpdf",
            format!("x = {x}, shape = {shape}, rate = {rate}"),
        ));
    }
    Ok(shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - ln_gamma_unchecked(shape))
}

/// `KL(N(μ, diag σ²) || N(0, I))` summed over dimensions.
pub fn gaussian_kl_std(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    if mu.len() != log_var.len() {
        return Err(Error::shape("gaussian_kl_std", &[mu.len()], &[log_var.len()]));
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum())
}

/// `KL(Dir(ψ) || Dir(α))`.
pub fn dirichlet_kl(psi: &[f64], alpha: &[f64]) -> Result<f64> {
    if psi.len() != alpha.len() {
        return Err(Error::shape("dirichlet_kl", &[psi.len()], &[alpha.len()]));
    }
    check_positive("dirichlet_kl", psi)?;
    check_positive("dirichlet_kl", alpha)?;
    let psi_sum: f64 = psi.iter().sum();
    let dg_sum = digamma_unchecked(psi_sum);
    let cross: f64 = psi
        .iter()
        .zip(alpha)
        .map(|(&p, &a)| (p - a) * (digamma_unchecked(p) - dg_sum))
        .sum();
    Ok(log_multivariate_beta(alpha)? - log_multivariate_beta(psi)? + cross)
}

/// `−Σ_k p_k ln p_k` with `0 ln 0 := 0`.
pub fn categorical_entropy(phi_row: &[f64]) -> Result<f64> {
    if let Some(&p) = phi_row.iter().find(|&&p| !(p >= 0.0)) {
        return Err(Error::domain("categorical_entropy", format!("negative or NaN entry {p}")));
    }
    let sum: f64 = phi_row.iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(Error::domain("categorical_entropy", format!("entries sum to {sum}")));
    }
    Ok(phi_row
        .iter()
        .filter(|&&p| p >= PROB_FLOOR)
        .map(|&p| -p * p.ln())
        .sum())
}

fn check_count(func: &'static str, y: f64) -> Result<()> {
    if !(y >= 0.0) || y.fract() != 0.0 || !y.is_finite() {
        return Err(Error::domain(func, format!("y = {y} must be a nonnegative integer")));
    }
    Ok(())
}

/// Negative-binomial log-mass with mean `mu` and inverse dispersion.
pub fn nb_logpmf(y: f64, mu: f64, inv_dispersion: f64) -> Result<f64> {
    check_count("nb_logpmf", y)?;
    if !(mu > 0.0) || !(inv_dispersion > 0.0) {
        return Err(Error::domain("nb_logpmf", format!("mu = {mu}, inv_dispersion = {inv_dispersion}")));
    }
    Ok(nb_logpmf_grad(y, mu, inv_dispersion).0)
}

/// NB log-mass with its partial derivatives `(value, d/dmu, d/dtheta)`.
pub(crate) fn nb_logpmf_grad(y: f64, mu: f64, theta: f64) -> (f64, f64, f64) {
    let log_theta_mu = (theta + mu).ln();
    let ln_theta = theta.ln();
    let value = if y == 0.0 {
        theta * (ln_theta - log_theta_mu)
    } else {
        ln_gamma_unchecked(y + theta) - ln_gamma_unchecked(y + 1.0) - ln_gamma_unchecked(theta)
            + theta * (ln_theta - log_theta_mu)
            + y * (mu.ln() - log_theta_mu)
    };
    let ratio = (theta + y) / (theta + mu);
    let d_mu = y / mu - ratio;
    let dg = if y == 0.0 {
        0.0
    } else {
        digamma_unchecked(y + theta) - digamma_unchecked(theta)
    };
    let d_theta = dg + ln_theta + 1.0 - log_theta_mu - ratio;
    (value, d_mu, d_theta)
}

/// Zero-inflated NB log-mass.
pub fn zinb_logpmf(y: f64, params: &ZinbParams) -> Result<f64> {
    check_count("zinb_logpmf", y)?;
    params.validate()?;
    let ZinbParams {
        mu,
        inv_dispersion,
        dropout_prob: pi,
    } = *params;
    let nb = nb_logpmf_grad(y, mu, inv_dispersion).0;
    if y > 0.0 {
        return Ok((-pi).ln_1p() + nb);
    }
    if pi >= 1.0 {
        return Ok(0.0);
    }
    if pi <= 0.0 {
        return Ok(nb);
    }
    // ln(π + (1 − π) e^{nb}) as a log-sum-exp
    let a = pi.ln();
    let b = (-pi).ln_1p() + nb;
    let m = a.max(b);
    Ok(m + ((a - m).exp() + (b - m).exp()).ln())
}

/// ZINB log-mass with the dropout probability given as a logit, returning
/// `(value, d/dmu, d/dtheta, d/dlogit)`.
pub(crate) fn zinb_logpmf_logit_grad(y: f64, mu: f64, theta: f64, logit: f64) -> (f64, f64, f64, f64) {
    let (nb, nb_mu, nb_theta) = nb_logpmf_grad(y, mu, theta);
    if y > 0.0 {
        // ln(1 − σ(a)) = −softplus(a)
        return (nb - softplus(logit), nb_mu, nb_theta, -sigmoid(logit));
    }
    // ln(σ(a) + σ(−a) e^{nb}) = logaddexp(a, nb) − softplus(a)
    let m = logit.max(nb);
    let lae = m + ((logit - m).exp() + (nb - m).exp()).ln();
    let value = lae - softplus(logit);
    let w_nb = sigmoid(nb - logit);
    let d_logit = sigmoid(logit - nb) - sigmoid(logit);
    (value, w_nb * nb_mu, w_nb * nb_theta, d_logit)
}
