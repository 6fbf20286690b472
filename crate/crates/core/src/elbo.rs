//! Training objectives: the collapsed bound, its non-collapsed and fixed-π
//! counterparts, and the hand-derived gradients used by the trainer.
//!
//! Gradients are written into the model's [`ParamStore`] for the loss
//! `-total`, so that a descent optimiser maximises the bound.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{reparam_with_noise, sigmoid, softplus, softplus_inverse, NdArray, SeededRng};
use crate::error::{Error, Result};
use crate::model::{BasisVae, Likelihood};
use crate::specialfn::{
    categorical_entropy, digamma_unchecked, dirichlet_kl, gaussian_kl_std, gaussian_logpdf, log_multivariate_beta,
    trigamma_unchecked, zinb_logpmf, zinb_logpmf_logit_grad, ZinbParams, LN_SQRT_2PI,
};

/// Rows processed per encoder/decoder pass; bounds peak memory.
const CHUNK_ROWS: usize = 128;
/// Basis-network rows per pass under translation invariance, where every
/// datum expands into one row per active (feature, component) pair.
const CHUNK_NET_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Scheme {
    #[default]
    #[serde(rename = "collapsed")]
    Collapsed,
    #[serde(rename = "noncollapsed")]
    NonCollapsed,
    #[serde(rename = "fixed_pi")]
    FixedPi,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Collapsed, Scheme::NonCollapsed, Scheme::FixedPi];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Collapsed => "collapsed",
            Scheme::NonCollapsed => "noncollapsed",
            Scheme::FixedPi => "fixed_pi",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s} (expected collapsed, noncollapsed or fixed_pi)")))
    }
}

/// Dirichlet concentration and the prior weight `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Either one value per component or a single symmetric value.
    pub alpha: Vec<f64>,
    pub beta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.1],
            beta: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn symmetric(alpha: f64, beta: f64) -> Self {
        Self {
            alpha: vec![alpha],
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("alpha must be positive, got {:?}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Concentration vector of length `k`.
    pub fn alpha_for(&self, k: usize) -> Result<Vec<f64>> {
        self.validate()?;
        match self.alpha.len() {
            1 => Ok(vec![self.alpha[0]; k]),
            n if n == k => Ok(self.alpha.clone()),
            n => Err(Error::Config(format!("alpha has {n} entries but K = {k}"))),
        }
    }
}

/// Individual objective terms. For the non-collapsed and fixed-π schemes
/// `collapsed_prior` holds that scheme's replacement prior term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub expected_loglik: f64,
    pub collapsed_prior: f64,
    pub assign_entropy: f64,
    pub latent_kl: f64,
    pub map_penalty: f64,
    pub total: f64,
    pub beta: f64,
}

impl ElboBreakdown {
    pub const TERMS: [&'static str; 5] = [
        "expected_loglik",
        "collapsed_prior",
        "assign_entropy",
        "latent_kl",
        "map_penalty",
    ];

    pub fn assemble(
        expected_loglik: f64,
        collapsed_prior: f64,
        assign_entropy: f64,
        latent_kl: f64,
        map_penalty: f64,
        beta: f64,
    ) -> Self {
        Self {
            expected_loglik,
            collapsed_prior,
            assign_entropy,
            latent_kl,
            map_penalty,
            total: expected_loglik - beta * latent_kl + beta * (collapsed_prior + assign_entropy) + map_penalty,
            beta,
        }
    }

    pub fn terms(&self) -> [f64; 5] {
        [
            self.expected_loglik,
            self.collapsed_prior,
            self.assign_entropy,
            self.latent_kl,
            self.map_penalty,
        ]
    }

    /// Errors naming the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::TERMS.iter().zip(self.terms()) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} = {v}")));
            }
        }
        if !self.total.is_finite() {
            return Err(Error::NonFinite(format!("total = {}", self.total)));
        }
        Ok(())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[ElboBreakdown]) -> Option<ElboBreakdown> {
        let n = items.len() as f64;
        let first = items.first()?;
        let sum = |f: fn(&ElboBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self::assemble(
            sum(|b| b.expected_loglik),
            sum(|b| b.collapsed_prior),
            sum(|b| b.assign_entropy),
            sum(|b| b.latent_kl),
            sum(|b| b.map_penalty),
            first.beta,
        ))
    }
}

fn check_phi(phi: &NdArray) -> Result<(usize, usize)> {
    if phi.ndim() != 2 {
        return Err(Error::shape("phi", &[0, 0], phi.shape()));
    }
    Ok((phi.shape()[0], phi.shape()[1]))
}

/// `Σ_i Σ_j Σ_k phi_jk * log_dens[i, j, k]`.
pub fn expected_loglik(log_dens: &NdArray, phi: &NdArray) -> Result<f64> {
    let (p, k) = check_phi(phi)?;
    log_dens.ensure_shape("expected_loglik log densities", &[log_dens.rows(), p, k])?;
    Ok(log_dens
        .data()
        .chunks(p * k)
        .map(|block| block.iter().zip(phi.data()).map(|(l, w)| l * w).sum::<f64>())
        .sum())
}

/// Gaussian log-densities `ln N(y_ij | means_ijk, variances_j)`, `[B, P, K]`.
pub fn gaussian_log_densities(y: &NdArray, means: &NdArray, variances: &[f64]) -> Result<NdArray> {
    let (b, p) = (y.rows(), y.cols());
    if means.ndim() != 3 || means.shape()[..2] != [b, p] || variances.len() != p {
        return Err(Error::shape("gaussian_log_densities", &[b, p, 0], means.shape()));
    }
    let k = means.shape()[2];
    let mut out = NdArray::zeros(means.shape());
    for i in 0..b {
        for j in 0..p {
            for kk in 0..k {
                let v = gaussian_logpdf(y.get2(i, j), means.get3(i, j, kk), variances[j])?;
                out.data_mut()[(i * p + j) * k + kk] = v;
            }
        }
    }
    Ok(out)
}

/// ZINB log-masses of counts `y` under per-entry parameters.
pub fn zinb_log_densities(y: &NdArray, params: impl Fn(usize, usize, usize) -> ZinbParams, k: usize) -> Result<NdArray> {
    let (b, p) = (y.rows(), y.cols());
    let mut out = NdArray::zeros(&[b, p, k]);
    for i in 0..b {
        for j in 0..p {
            for kk in 0..k {
                out.data_mut()[(i * p + j) * k + kk] = zinb_logpmf(y.get2(i, j), &params(i, j, kk))?;
            }
        }
    }
    Ok(out)
}

fn component_mass(phi: &NdArray) -> Vec<f64> {
    let k = phi.cols();
    let mut n = vec![0.0; k];
    for j in 0..phi.rows() {
        for (nk, &v) in n.iter_mut().zip(phi.row(j)) {
            *nk += v;
        }
    }
    n
}

fn check_alpha(alpha: &[f64], k: usize) -> Result<()> {
    if alpha.len() != k {
        return Err(Error::shape("alpha", &[k], &[alpha.len()]));
    }
    if let Some(a) = alpha.iter().find(|&&a| !(a > 0.0)) {
        return Err(Error::domain("dirichlet prior", format!("alpha = {a}")));
    }
    Ok(())
}

/// `ln B(n + alpha) − ln B(alpha)` with `n_k = Σ_j phi_jk`.
pub fn collapsed_dirichlet_term(phi: &NdArray, alpha: &[f64]) -> Result<f64> {
    let (_, k) = check_phi(phi)?;
    check_alpha(alpha, k)?;
    let post: Vec<f64> = component_mass(phi).iter().zip(alpha).map(|(n, a)| n + a).collect();
    Ok(log_multivariate_beta(&post)? - log_multivariate_beta(alpha)?)
}

/// Derivative of [`collapsed_dirichlet_term`] with respect to each `n_k`.
pub fn collapsed_dirichlet_grad(phi: &NdArray, alpha: &[f64]) -> Result<Vec<f64>> {
    let (_, k) = check_phi(phi)?;
    check_alpha(alpha, k)?;
    let post: Vec<f64> = component_mass(phi).iter().zip(alpha).map(|(n, a)| n + a).collect();
    let dg_sum = digamma_unchecked(post.iter().sum());
    Ok(post.iter().map(|&v| digamma_unchecked(v) - dg_sum).collect())
}

/// `Σ_j H(phi_j)`.
pub fn assignment_entropy(phi: &NdArray) -> Result<f64> {
    check_phi(phi)?;
    (0..phi.rows()).map(|j| categorical_entropy(phi.row(j))).sum()
}

/// `Σ_i KL(N(mu_i, exp(log_var_i)) || N(0, I))`.
pub fn latent_kl(mu: &NdArray, log_var: &NdArray) -> Result<f64> {
    if mu.shape() != log_var.shape() {
        return Err(Error::shape("latent_kl", mu.shape(), log_var.shape()));
    }
    (0..mu.rows()).map(|i| gaussian_kl_std(mu.row(i), log_var.row(i))).sum()
}

/// Log-prior of the MAP parameters: `Gamma(1, 1)` on each `lambda` and
/// `N(0, 1)` on each `delta` coordinate. Pass `None` for a disabled group.
pub fn map_penalty(lambda: Option<&NdArray>, delta: Option<&NdArray>) -> Result<f64> {
    let mut total = 0.0;
    if let Some(lambda) = lambda {
        if let Some(l) = lambda.data().iter().find(|&&l| !(l > 0.0)) {
            return Err(Error::domain("map_penalty", format!("lambda = {l}")));
        }
        total -= lambda.sum();
    }
    if let Some(delta) = delta {
        total -= delta.data().iter().map(|d| LN_SQRT_2PI + 0.5 * d * d).sum::<f64>();
    }
    Ok(total)
}

/// `E_q[ln p(w | pi)] − KL(q(pi) || p(pi))` for `q(pi) = Dir(psi)`.
pub fn noncollapsed_prior_term(phi: &NdArray, psi: &[f64], alpha: &[f64]) -> Result<f64> {
    let (_, k) = check_phi(phi)?;
    check_alpha(alpha, k)?;
    if psi.len() != k {
        return Err(Error::shape("psi", &[k], &[psi.len()]));
    }
    let kl = dirichlet_kl(psi, alpha)?;
    let dg_sum = digamma_unchecked(psi.iter().sum());
    let e_log_pi: f64 = component_mass(phi)
        .iter()
        .zip(psi)
        .map(|(n, &s)| n * (digamma_unchecked(s) - dg_sum))
        .sum();
    Ok(e_log_pi - kl)
}

/// Gradients of [`noncollapsed_prior_term`]: `(d/dn_k, d/dpsi_k)`.
fn noncollapsed_prior_grad(phi: &NdArray, psi: &[f64], alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = component_mass(phi);
    let s: f64 = psi.iter().sum();
    let a: f64 = alpha.iter().sum();
    let n_sum: f64 = n.iter().sum();
    let (dg_s, tg_s) = (digamma_unchecked(s), trigamma_unchecked(s));
    let d_n = psi.iter().map(|&v| digamma_unchecked(v) - dg_s).collect();
    let d_psi = (0..psi.len())
        .map(|k| {
            let tg = trigamma_unchecked(psi[k]);
            n[k] * tg - tg_s * n_sum - ((psi[k] - alpha[k]) * tg - tg_s * (s - a))
        })
        .collect();
    (d_n, d_psi)
}

/// Prior term of the fixed-π baseline, `−P ln K`.
pub fn fixedpi_prior_term(p: usize, k: usize) -> f64 {
    -(p as f64) * (k as f64).ln()
}

/// A minibatch together with its reparameterisation noise.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    /// Raw observations `[B, P]`.
    pub y: &'a NdArray,
    /// Standard-normal draws `[B, Q]`.
    pub eps: &'a NdArray,
    /// Dataset size; likelihood and latent KL are scaled by `n_total / B`.
    pub n_total: usize,
}

/// Objective value without gradients.
pub fn objective(model: &BasisVae, scheme: Scheme, prior: &PriorConfig, batch: Batch<'_>) -> Result<ElboBreakdown> {
    run(&mut model.clone(), scheme, prior, batch, false)
}

/// Objective value; accumulates gradients of `-total` into `model.store`.
pub fn objective_and_grad(
    model: &mut BasisVae,
    scheme: Scheme,
    prior: &PriorConfig,
    batch: Batch<'_>,
) -> Result<ElboBreakdown> {
    run(model, scheme, prior, batch, true)
}

pub fn collapsed_objective(
    model: &BasisVae,
    y: &NdArray,
    n_total: usize,
    prior: &PriorConfig,
    rng: &mut SeededRng,
) -> Result<ElboBreakdown> {
    let eps = rng.standard_normal(&[y.rows(), model.config.q]);
    objective(model, Scheme::Collapsed, prior, Batch { y, eps: &eps, n_total })
}

pub fn noncollapsed_objective(
    model: &BasisVae,
    y: &NdArray,
    n_total: usize,
    psi: &[f64],
    prior: &PriorConfig,
    rng: &mut SeededRng,
) -> Result<ElboBreakdown> {
    let k = model.config.k;
    if psi.len() != k {
        return Err(Error::shape("psi", &[k], &[psi.len()]));
    }
    if let Some(v) = psi.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::domain("noncollapsed_objective", format!("psi = {v}")));
    }
    let mut m = model.clone();
    m.add_dirichlet_posterior(&prior.alpha_for(k)?)?;
    let id = m.psi_raw_id().expect("posterior just added");
    m.store
        .set_value(id, NdArray::from_vec(&[k], psi.iter().map(|&v| softplus_inverse(v)).collect())?)?;
    let eps = rng.standard_normal(&[y.rows(), model.config.q]);
    run(&mut m, Scheme::NonCollapsed, prior, Batch { y, eps: &eps, n_total }, false)
}

pub fn fixedpi_objective(
    model: &BasisVae,
    y: &NdArray,
    n_total: usize,
    prior: &PriorConfig,
    rng: &mut SeededRng,
) -> Result<ElboBreakdown> {
    let eps = rng.standard_normal(&[y.rows(), model.config.q]);
    objective(model, Scheme::FixedPi, prior, Batch { y, eps: &eps, n_total })
}

/// Responsibilities used in the likelihood: `phi` itself, or with a
/// threshold, `phi` with small entries zeroed (the row maximum is always
/// kept) and rows renormalised. Returns the mask alongside.
fn effective_phi(phi: &NdArray, threshold: Option<f64>) -> (NdArray, Option<Vec<bool>>) {
    let Some(t) = threshold.filter(|&t| t > 0.0) else {
        return (phi.clone(), None);
    };
    let k = phi.cols();
    let mut eff = phi.clone();
    let mut mask = vec![false; phi.len()];
    for j in 0..phi.rows() {
        let best = crate::model::argmax_lowest(phi.row(j));
        let row = eff.row_mut(j);
        let mut z = 0.0;
        for (kk, v) in row.iter_mut().enumerate() {
            if *v >= t || kk == best {
                mask[j * k + kk] = true;
                z += *v;
            } else {
                *v = 0.0;
            }
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    (eff, Some(mask))
}

fn check_batch(model: &BasisVae, batch: &Batch<'_>) -> Result<()> {
    let (p, q) = (model.config.p, model.config.q);
    let b = batch.y.rows();
    if b == 0 {
        return Err(Error::Empty("objective batch".into()));
    }
    batch.y.ensure_shape("batch observations", &[b, p])?;
    batch.eps.ensure_shape("batch noise", &[b, q])?;
    if batch.n_total < b {
        return Err(Error::Config(format!("n_total {} smaller than batch size {b}", batch.n_total)));
    }
    if model.config.likelihood == Likelihood::Zinb {
        if let Some(v) = batch.y.data().iter().find(|&&v| !(v >= 0.0 && v.fract() == 0.0 && v.is_finite())) {
            return Err(Error::domain("zinb likelihood", format!("observation {v} is not a count")));
        }
    }
    Ok(())
}

fn run(model: &mut BasisVae, scheme: Scheme, prior: &PriorConfig, batch: Batch<'_>, want_grad: bool) -> Result<ElboBreakdown> {
    check_batch(model, &batch)?;
    let cfg = model.config.clone();
    let (p, k) = (cfg.p, cfg.k);
    let alpha = prior.alpha_for(k)?;
    let beta = prior.beta;
    let b = batch.y.rows();
    let scale = batch.n_total as f64 / b as f64;

    let phi = model.phi();
    let log_phi = model.log_phi();
    let (phi_eff, mask) = effective_phi(&phi, cfg.responsibility_threshold);
    let lambda = model.lambda();
    let noise = model.store.value(model.noise_id()).data().to_vec();
    let variances: Vec<f64> = noise.iter().map(|v| v.exp()).collect();
    let zinb = cfg.likelihood == Likelihood::Zinb;

    let mut ll_sum = vec![0.0; p * k];
    let mut e_ll = 0.0;
    let mut kl = 0.0;
    let mut d_lambda = vec![0.0; p * k];
    let mut d_noise = vec![0.0; p];

    let chunk = if cfg.translation_invariant {
        let active = mask.as_ref().map_or(p * k, |m| m.iter().filter(|&&on| on).count());
        (CHUNK_NET_ROWS / active.max(1)).clamp(1, CHUNK_ROWS)
    } else {
        CHUNK_ROWS
    };
    for start in (0..b).step_by(chunk) {
        let rows: Vec<usize> = (start..(start + chunk).min(b)).collect();
        let bc = rows.len();
        let yc = batch.y.select_rows(&rows);
        let ec = batch.eps.select_rows(&rows);
        let enc = model.encode(&model.encoder_input(&yc))?;
        let z = reparam_with_noise(&enc.mu, &enc.log_var, &ec)?;
        let eval = model.basis_values(&z, mask.as_ref().map(|_| &phi_eff))?;
        let dropout = model.dropout_logits(&z)?;

        let mut d_f = NdArray::zeros(&[bc, p, k]);
        let mut d_logit = NdArray::zeros(&[bc, p]);
        let vals = eval.values.data();
        let df = d_f.data_mut();
        for i in 0..bc {
            for j in 0..p {
                let yv = yc.get2(i, j);
                let logit = dropout.as_ref().map_or(0.0, |(l, _)| l.get2(i, j));
                for kk in 0..k {
                    let w = phi_eff.data()[j * k + kk];
                    if mask.as_ref().is_some_and(|m| !m[j * k + kk]) {
                        continue;
                    }
                    let idx = (i * p + j) * k + kk;
                    let f = vals[idx];
                    let lam = lambda.data()[j * k + kk];
                    let m = lam * f;
                    let (ll, d_m, d_nu, d_lg) = if zinb {
                        let theta = variances[j];
                        let (v, d_mu, d_theta, d_lg) = zinb_logpmf_logit_grad(yv, softplus(m), theta, logit);
                        (v, d_mu * sigmoid(m), d_theta * theta, d_lg)
                    } else {
                        let r = yv - m;
                        let rv = r * r / (2.0 * variances[j]);
                        (-LN_SQRT_2PI - 0.5 * noise[j] - rv, r / variances[j], rv - 0.5, 0.0)
                    };
                    e_ll += w * ll;
                    ll_sum[j * k + kk] += ll;
                    if want_grad {
                        let g = scale * w * d_m;
                        df[idx] = -g * lam;
                        d_lambda[j * k + kk] += g * f;
                        d_noise[j] += scale * w * d_nu;
                        if zinb {
                            d_logit.data_mut()[i * p + j] -= scale * w * d_lg;
                        }
                    }
                }
            }
        }
        kl += latent_kl(&enc.mu, &enc.log_var)?;

        if want_grad {
            let mut dz = model.basis_values_backward(&eval, &d_f)?;
            if let Some((_, cache)) = &dropout {
                let dz_drop = model.dropout_backward(cache, &d_logit)?;
                for (a, b) in dz.data_mut().iter_mut().zip(dz_drop.data()) {
                    *a += b;
                }
            }
            let q = cfg.q;
            let mut d_mu = NdArray::zeros(&[bc, q]);
            let mut d_lv = NdArray::zeros(&[bc, q]);
            for idx in 0..bc * q {
                let (mu, lv, e, g) = (enc.mu.data()[idx], enc.log_var.data()[idx], ec.data()[idx], dz.data()[idx]);
                d_mu.data_mut()[idx] = g + beta * scale * mu;
                d_lv.data_mut()[idx] = g * e * 0.5 * (0.5 * lv).exp() + beta * scale * 0.5 * (lv.exp() - 1.0);
            }
            model.encode_backward(&enc, &d_mu, &d_lv)?;
        }
    }

    let entropy = assignment_entropy(&phi)?;
    let psi = model.psi();
    let (prior_term, d_n, d_psi) = match scheme {
        Scheme::Collapsed => (
            collapsed_dirichlet_term(&phi, &alpha)?,
            collapsed_dirichlet_grad(&phi, &alpha)?,
            None,
        ),
        Scheme::NonCollapsed => {
            let psi = psi
                .as_ref()
                .ok_or_else(|| Error::Config("noncollapsed scheme needs a Dirichlet posterior".into()))?;
            let (d_n, d_psi) = noncollapsed_prior_grad(&phi, psi, &alpha);
            (noncollapsed_prior_term(&phi, psi, &alpha)?, d_n, Some(d_psi))
        }
        Scheme::FixedPi => (fixedpi_prior_term(p, k), vec![0.0; k], None),
    };
    let delta = model.delta();
    let penalty = map_penalty(
        cfg.uses_scale().then_some(&lambda),
        cfg.translation_invariant.then_some(&delta),
    )?;
    let out = ElboBreakdown::assemble(scale * e_ll, prior_term, entropy, scale * kl, penalty, beta);
    out.check_finite()?;
    if !want_grad {
        return Ok(out);
    }

    // d total / d phi from the likelihood, mapped through the renormalisation
    let mut d_phi: Vec<f64> = ll_sum.iter().map(|l| scale * l).collect();
    if let Some(mask) = &mask {
        for j in 0..p {
            let row = &mut d_phi[j * k..(j + 1) * k];
            let z: f64 = (0..k).filter(|&kk| mask[j * k + kk]).map(|kk| phi.get2(j, kk)).sum();
            let mean: f64 = (0..k).map(|kk| phi_eff.get2(j, kk) * row[kk]).sum();
            for kk in 0..k {
                row[kk] = if mask[j * k + kk] { (row[kk] - mean) / z } else { 0.0 };
            }
        }
    }
    let logits_id = model.assign_logits_id();
    let g = model.store.grad_mut(logits_id).data_mut();
    for j in 0..p {
        let ph = phi.row(j);
        let lp = log_phi.row(j);
        let dp: Vec<f64> = (0..k).map(|kk| d_phi[j * k + kk] + beta * d_n[kk]).collect();
        let mean_dp: f64 = ph.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let mean_lp: f64 = ph.iter().zip(lp).map(|(a, b)| a * b).sum();
        for kk in 0..k {
            let d_logit = ph[kk] * (dp[kk] - mean_dp) - beta * ph[kk] * (lp[kk] - mean_lp);
            g[j * k + kk] -= d_logit;
        }
    }
    if cfg.uses_scale() {
        let id = model.lambda_raw_id();
        let (raw, g) = model.store.value_and_grad_mut(id);
        for ((gv, &r), dl) in g.data_mut().iter_mut().zip(raw.data()).zip(&d_lambda) {
            *gv -= (dl - 1.0) * sigmoid(r);
        }
    }
    if cfg.translation_invariant {
        let id = model.delta_id();
        let (d, g) = model.store.value_and_grad_mut(id);
        for (gv, &dv) in g.data_mut().iter_mut().zip(d.data()) {
            *gv += dv;
        }
    }
    let id = model.noise_id();
    for (gv, dn) in model.store.grad_mut(id).data_mut().iter_mut().zip(&d_noise) {
        *gv -= dn;
    }
    if let (Some(d_psi), Some(id)) = (d_psi, model.psi_raw_id()) {
        let (raw, g) = model.store.value_and_grad_mut(id);
        for ((gv, &r), dp) in g.data_mut().iter_mut().zip(raw.data()).zip(&d_psi) {
            *gv -= beta * dp * sigmoid(r);
        }
    }
    Ok(out)
}
