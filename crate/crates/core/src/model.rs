//! The basis-decoder VAE: amortised Gaussian encoder, `K` shared basis
//! functions, per-feature scale/shift/assignment parameters and the
//! Gaussian or ZINB likelihood heads.

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    clamp_log_var, log_softmax_rows, sigmoid, softmax_rows, softplus, softplus_inverse, Activation, Mlp, MlpCache,
    MlpSpec, NdArray, ParamId, ParamStore, SeededRng, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::error::{Error, Result};
use crate::specialfn::ZinbParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    #[default]
    Gaussian,
    Zinb,
}

impl std::str::FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Likelihood::Gaussian),
            "zinb" => Ok(Likelihood::Zinb),
            other => Err(Error::Config(format!("unknown likelihood {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of observed features.
    pub p: usize,
    /// Latent dimension.
    pub q: usize,
    /// Number of basis functions.
    pub k: usize,
    pub likelihood: Likelihood,
    pub translation_invariant: bool,
    /// Ignored (treated as `true`) when `translation_invariant` is set.
    pub scale_invariant: bool,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub dropout_hidden: Vec<usize>,
    pub activation: Activation,
    /// When set, components with responsibility below the threshold are
    /// skipped in the likelihood and the remaining ones renormalised.
    pub responsibility_threshold: Option<f64>,
    /// Initial value of every per-feature noise parameter (`ln sigma^2` or
    /// `ln theta`).
    #[serde(default = "default_init_noise")]
    pub init_noise: f64,
}

/// Starting `ln sigma^2`. Starting at unit variance lets the Gaussian
/// likelihood explain the data as noise and the encoder collapses.
pub const DEFAULT_INIT_NOISE: f64 = -2.0;

fn default_init_noise() -> f64 {
    DEFAULT_INIT_NOISE
}

impl ModelConfig {
    pub fn new(p: usize, q: usize, k: usize) -> Self {
        Self {
            p,
            q,
            k,
            likelihood: Likelihood::Gaussian,
            translation_invariant: false,
            scale_invariant: true,
            encoder_hidden: vec![64],
            decoder_hidden: vec![32],
            dropout_hidden: vec![32],
            activation: Activation::Tanh,
            responsibility_threshold: None,
            init_noise: DEFAULT_INIT_NOISE,
        }
    }

    pub fn uses_scale(&self) -> bool {
        self.scale_invariant || self.translation_invariant
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 || self.k == 0 {
            return Err(Error::Config(format!(
                "P, Q, K must be positive (got {}, {}, {})",
                self.p, self.q, self.k
            )));
        }
        if !self.init_noise.is_finite() {
            return Err(Error::Config(format!("init_noise must be finite, got {}", self.init_noise)));
        }
        if let Some(t) = self.responsibility_threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("responsibility threshold {t} outside [0, 1)")));
            }
        }
        self.encoder_spec().validate()?;
        self.basis_spec().validate()?;
        self.dropout_spec().validate()
    }

    /// Encoder network: the final affine layer carries both heads
    /// (`mu` in the first `Q` outputs, `log_var` in the last `Q`).
    pub fn encoder_spec(&self) -> MlpSpec {
        MlpSpec::new(self.p, &self.encoder_hidden, 2 * self.q, self.activation)
    }

    pub fn basis_spec(&self) -> MlpSpec {
        MlpSpec::new(self.q, &self.decoder_hidden, self.k, self.activation)
    }

    pub fn dropout_spec(&self) -> MlpSpec {
        MlpSpec::new(self.q, &self.dropout_hidden, self.p, self.activation)
    }
}

/// Encoder outputs for a batch. `log_var` is already clamped.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub mu: NdArray,
    pub log_var: NdArray,
    raw_log_var: NdArray,
    cache: MlpCache,
}

/// Basis functions evaluated for every `(row, feature, component)`.
#[derive(Debug, Clone)]
pub struct BasisEval {
    /// `[B, P, K]`; entries of skipped pairs are zero.
    pub values: NdArray,
    /// Rows pushed through the basis network.
    pub net_rows: usize,
    translation_invariant: bool,
    /// Active `(j, k)` pairs when translation invariant.
    pairs: Vec<(usize, usize)>,
    cache: MlpCache,
}

/// Per-entry ZINB parameters produced by [`zinb_heads`].
#[derive(Debug, Clone)]
pub struct ZinbHeads {
    /// `[B, P, K]` component means `softplus(component_mean)`.
    pub mu: NdArray,
    /// `[B, P]` dropout probabilities, shared across components.
    pub dropout: NdArray,
    /// `[P]` inverse dispersions, shared across rows and components.
    pub inv_dispersion: Vec<f64>,
}

impl ZinbHeads {
    pub fn params(&self, i: usize, j: usize, k: usize) -> ZinbParams {
        ZinbParams {
            mu: self.mu.get3(i, j, k),
            inv_dispersion: self.inv_dispersion[j],
            dropout_prob: self.dropout.get2(i, j),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisVae {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: Mlp,
    basis: Mlp,
    dropout: Option<Mlp>,
    lambda_raw: ParamId,
    delta: ParamId,
    assign_logits: ParamId,
    noise: ParamId,
    psi_raw: Option<ParamId>,
}

pub const LAMBDA_RAW: &str = "lambda_raw";
pub const DELTA: &str = "delta";
pub const ASSIGN_LOGITS: &str = "assign_logits";
pub const NOISE: &str = "noise";
pub const PSI_RAW: &str = "psi_raw";

impl BasisVae {
    /// Fresh model: Glorot networks, `lambda = 1`, `delta = 0`, assignment
    /// logits `N(0, 0.01^2)`, noise parameters at `config.init_noise`.
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (p, q, k) = (config.p, config.q, config.k);
        let mut store = ParamStore::new();
        let encoder = Mlp::new(config.encoder_spec(), &mut store, "encoder", rng)?;
        let basis = Mlp::new(config.basis_spec(), &mut store, "basis", rng)?;
        let dropout = match config.likelihood {
            Likelihood::Zinb => Some(Mlp::new(config.dropout_spec(), &mut store, "dropout", rng)?),
            Likelihood::Gaussian => None,
        };
        let lambda_raw = store.add(LAMBDA_RAW, NdArray::filled(&[p, k], softplus_inverse(1.0)))?;
        let delta = store.add(DELTA, NdArray::zeros(&[p, k, q]))?;
        let logits = NdArray::from_vec(&[p, k], (0..p * k).map(|_| 0.01 * rng.normal()).collect())?;
        let assign_logits = store.add(ASSIGN_LOGITS, logits)?;
        let noise = store.add(NOISE, NdArray::filled(&[p], config.init_noise))?;
        Ok(Self {
            config,
            store,
            encoder,
            basis,
            dropout,
            lambda_raw,
            delta,
            assign_logits,
            noise,
            psi_raw: None,
        })
    }

    /// Rebinds a populated parameter store, e.g. from a checkpoint.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (p, q, k) = (config.p, config.q, config.k);
        let encoder = Mlp::bind(config.encoder_spec(), &store, "encoder")?;
        let basis = Mlp::bind(config.basis_spec(), &store, "basis")?;
        let dropout = match config.likelihood {
            Likelihood::Zinb => Some(Mlp::bind(config.dropout_spec(), &store, "dropout")?),
            Likelihood::Gaussian => None,
        };
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            store.value(id).ensure_shape(name, shape)?;
            Ok(id)
        };
        let lambda_raw = find(LAMBDA_RAW, &[p, k])?;
        let delta = find(DELTA, &[p, k, q])?;
        let assign_logits = find(ASSIGN_LOGITS, &[p, k])?;
        let noise = find(NOISE, &[p])?;
        let psi_raw = match store.id(PSI_RAW) {
            Some(_) => Some(find(PSI_RAW, &[k])?),
            None => None,
        };
        Ok(Self {
            config,
            store,
            encoder,
            basis,
            dropout,
            lambda_raw,
            delta,
            assign_logits,
            noise,
            psi_raw,
        })
    }

    /// Adds the Dirichlet factor `q(pi) = Dir(psi)` used by non-collapsed
    /// inference, initialised at `alpha + P/K`.
    pub fn add_dirichlet_posterior(&mut self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.config.k {
            return Err(Error::shape("dirichlet posterior", &[self.config.k], &[alpha.len()]));
        }
        if self.psi_raw.is_some() {
            return Ok(());
        }
        let fill = self.config.p as f64 / self.config.k as f64;
        let raw = alpha.iter().map(|&a| softplus_inverse(a + fill)).collect();
        self.psi_raw = Some(self.store.add(PSI_RAW, NdArray::from_vec(&[self.config.k], raw)?)?);
        Ok(())
    }

    pub fn lambda_raw_id(&self) -> ParamId {
        self.lambda_raw
    }
    pub fn delta_id(&self) -> ParamId {
        self.delta
    }
    pub fn assign_logits_id(&self) -> ParamId {
        self.assign_logits
    }
    pub fn noise_id(&self) -> ParamId {
        self.noise
    }
    pub fn psi_raw_id(&self) -> Option<ParamId> {
        self.psi_raw
    }
    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }
    pub fn basis_net(&self) -> &Mlp {
        &self.basis
    }
    pub fn dropout_net(&self) -> Option<&Mlp> {
        self.dropout.as_ref()
    }

    /// `lambda = softplus(lambda_raw)`, or all ones without scale invariance.
    pub fn lambda(&self) -> NdArray {
        if self.config.uses_scale() {
            self.store.value(self.lambda_raw).map(softplus)
        } else {
            NdArray::filled(&[self.config.p, self.config.k], 1.0)
        }
    }

    /// Shifts `[P, K, Q]`; zero when not translation invariant.
    pub fn delta(&self) -> NdArray {
        if self.config.translation_invariant {
            self.store.value(self.delta).clone()
        } else {
            NdArray::zeros(&[self.config.p, self.config.k, self.config.q])
        }
    }

    /// Responsibilities `phi = softmax(assign_logits)`, `[P, K]`.
    pub fn phi(&self) -> NdArray {
        softmax_rows(self.store.value(self.assign_logits))
    }

    pub fn log_phi(&self) -> NdArray {
        log_softmax_rows(self.store.value(self.assign_logits))
    }

    /// Dirichlet posterior concentrations, if present.
    pub fn psi(&self) -> Option<Vec<f64>> {
        self.psi_raw
            .map(|id| self.store.value(id).data().iter().map(|&r| softplus(r)).collect())
    }

    /// Per-feature noise variance (Gaussian) or inverse dispersion (ZINB).
    pub fn noise_scale(&self) -> Vec<f64> {
        self.store.value(self.noise).data().iter().map(|v| v.exp()).collect()
    }

    /// Encoder input for raw observations: counts go through `ln(1 + y)`.
    pub fn encoder_input(&self, y: &NdArray) -> NdArray {
        match self.config.likelihood {
            Likelihood::Gaussian => y.clone(),
            Likelihood::Zinb => y.map(|v| v.ln_1p()),
        }
    }

    /// Runs the encoder on already-transformed input (see [`Self::encoder_input`]).
    pub fn encode(&self, x: &NdArray) -> Result<Encoded> {
        let (out, cache) = self.encoder.forward(&self.store, x)?;
        let (b, q) = (x.rows(), self.config.q);
        let mut mu = NdArray::zeros(&[b, q]);
        let mut raw = NdArray::zeros(&[b, q]);
        for i in 0..b {
            let row = out.row(i);
            mu.row_mut(i).copy_from_slice(&row[..q]);
            raw.row_mut(i).copy_from_slice(&row[q..]);
        }
        let log_var = raw.map(clamp_log_var);
        Ok(Encoded {
            mu,
            log_var,
            raw_log_var: raw,
            cache,
        })
    }

    /// Accumulates encoder gradients from `dLoss/dmu` and `dLoss/dlog_var`
    /// (the latter w.r.t. the clamped value; zero outside the clamp range).
    pub fn encode_backward(&mut self, enc: &Encoded, d_mu: &NdArray, d_log_var: &NdArray) -> Result<()> {
        let (b, q) = (enc.mu.rows(), self.config.q);
        d_mu.ensure_shape("encoder mu gradient", &[b, q])?;
        d_log_var.ensure_shape("encoder log_var gradient", &[b, q])?;
        let mut up = NdArray::zeros(&[b, 2 * q]);
        for i in 0..b {
            let row = up.row_mut(i);
            row[..q].copy_from_slice(d_mu.row(i));
            for c in 0..q {
                let raw = enc.raw_log_var.get2(i, c);
                if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) {
                    row[q + c] = d_log_var.get2(i, c);
                }
            }
        }
        self.encoder.backward(&mut self.store, &enc.cache, &up)?;
        Ok(())
    }

    fn active_pairs(phi: Option<&NdArray>, p: usize, k: usize) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(p * k);
        for j in 0..p {
            for kk in 0..k {
                if phi.is_none_or(|phi| phi.get2(j, kk) > 0.0) {
                    pairs.push((j, kk));
                }
            }
        }
        pairs
    }

    /// Basis values for latent batch `z`. Under translation invariance,
    /// `(j, k)` pairs where `phi` is exactly zero are skipped.
    pub fn basis_values(&self, z: &NdArray, phi: Option<&NdArray>) -> Result<BasisEval> {
        let (p, q, k) = (self.config.p, self.config.q, self.config.k);
        z.ensure_shape("basis_values z", &[z.rows(), q])?;
        let b = z.rows();
        if !self.config.translation_invariant {
            let (vals, cache) = self.basis.forward(&self.store, z)?;
            let mut values = NdArray::zeros(&[b, p, k]);
            let v = values.data_mut();
            for i in 0..b {
                let src = vals.row(i);
                for j in 0..p {
                    v[(i * p + j) * k..(i * p + j + 1) * k].copy_from_slice(src);
                }
            }
            return Ok(BasisEval {
                values,
                net_rows: b,
                translation_invariant: false,
                pairs: Vec::new(),
                cache,
            });
        }
        let pairs = Self::active_pairs(phi, p, k);
        let delta = self.store.value(self.delta).data();
        let rows = b * pairs.len();
        let mut x = Vec::with_capacity(rows * q);
        let mut select = Vec::with_capacity(rows);
        for i in 0..b {
            let zi = z.row(i);
            for &(j, kk) in &pairs {
                let d = &delta[(j * k + kk) * q..(j * k + kk + 1) * q];
                x.extend(zi.iter().zip(d).map(|(a, b)| a + b));
                select.push(kk);
            }
        }
        let x = NdArray::from_vec(&[rows, q], x)?;
        let (out, cache) = self.basis.forward_selected(&self.store, &x, &select)?;
        let mut values = NdArray::zeros(&[b, p, k]);
        let v = values.data_mut();
        let np = pairs.len();
        for i in 0..b {
            for (pi, &(j, kk)) in pairs.iter().enumerate() {
                v[(i * p + j) * k + kk] = out[i * np + pi];
            }
        }
        Ok(BasisEval {
            values,
            net_rows: rows,
            translation_invariant: true,
            pairs,
            cache,
        })
    }

    /// Back-propagates `dLoss/dvalues` into the basis network (and `delta`),
    /// returning `dLoss/dz`.
    pub fn basis_values_backward(&mut self, eval: &BasisEval, d_values: &NdArray) -> Result<NdArray> {
        let (p, q, k) = (self.config.p, self.config.q, self.config.k);
        let b = eval.values.rows();
        d_values.ensure_shape("basis_values gradient", &[b, p, k])?;
        let dv = d_values.data();
        if !eval.translation_invariant {
            let mut up = NdArray::zeros(&[b, k]);
            for i in 0..b {
                let row = up.row_mut(i);
                for j in 0..p {
                    for (u, &d) in row.iter_mut().zip(&dv[(i * p + j) * k..(i * p + j + 1) * k]) {
                        *u += d;
                    }
                }
            }
            return self.basis.backward(&mut self.store, &eval.cache, &up);
        }
        let np = eval.pairs.len();
        let mut up = Vec::with_capacity(b * np);
        let mut select = Vec::with_capacity(b * np);
        for i in 0..b {
            for &(j, kk) in &eval.pairs {
                up.push(dv[(i * p + j) * k + kk]);
                select.push(kk);
            }
        }
        let dx = self
            .basis
            .backward_selected(&mut self.store, &eval.cache, &select, &up)?;
        let mut dz = NdArray::zeros(&[b, q]);
        let dd = self.store.grad_mut(self.delta).data_mut();
        for i in 0..b {
            for (pi, &(j, kk)) in eval.pairs.iter().enumerate() {
                let g = dx.row(i * np + pi);
                for c in 0..q {
                    dd[(j * k + kk) * q + c] += g[c];
                }
                for (zc, gc) in dz.row_mut(i).iter_mut().zip(g) {
                    *zc += gc;
                }
            }
        }
        Ok(dz)
    }

    /// Component means `lambda_jk * f_k(z_i + delta_jk)`, `[B, P, K]`.
    pub fn component_means(&self, eval: &BasisEval) -> Result<NdArray> {
        component_means(&eval.values, &self.lambda(), self.config.uses_scale())
    }

    /// Dropout logits `[B, P]` from the (unclustered) dropout network.
    pub fn dropout_logits(&self, z: &NdArray) -> Result<Option<(NdArray, MlpCache)>> {
        match &self.dropout {
            Some(net) => Ok(Some(net.forward(&self.store, z)?)),
            None => Ok(None),
        }
    }

    pub fn dropout_backward(&mut self, cache: &MlpCache, d_logits: &NdArray) -> Result<NdArray> {
        let net = self
            .dropout
            .as_ref()
            .ok_or_else(|| Error::Config("model has no dropout network".into()))?;
        net.backward(&mut self.store, cache, d_logits)
    }

    /// Decoded means using each feature's most responsible component
    /// (ties to the lowest index), `[B, P]`.
    pub fn reconstruct(&self, z: &NdArray) -> Result<NdArray> {
        let (p, q, k) = (self.config.p, self.config.q, self.config.k);
        z.ensure_shape("reconstruct z", &[z.rows(), q])?;
        let b = z.rows();
        let phi = self.phi();
        let lambda = self.lambda();
        let delta = self.delta();
        let best: Vec<usize> = (0..p).map(|j| argmax_lowest(phi.row(j))).collect();
        let mut x = Vec::with_capacity(b * p * q);
        let mut select = Vec::with_capacity(b * p);
        for i in 0..b {
            for (j, &kk) in best.iter().enumerate() {
                let d = &delta.data()[(j * k + kk) * q..(j * k + kk + 1) * q];
                x.extend(z.row(i).iter().zip(d).map(|(a, b)| a + b));
                select.push(kk);
            }
        }
        let x = NdArray::from_vec(&[b * p, q], x)?;
        let f = self.basis.predict_selected(&self.store, &x, &select)?;
        let mut out = NdArray::zeros(&[b, p]);
        for i in 0..b {
            for (j, &kk) in best.iter().enumerate() {
                out.set2(i, j, lambda.get2(j, kk) * f[i * p + j]);
            }
        }
        Ok(out)
    }

    /// Posterior means of `z` for a data matrix (no sampling).
    pub fn latent_means(&self, y: &NdArray) -> Result<NdArray> {
        let x = self.encoder_input(y);
        let out = self.encoder.predict(&self.store, &x)?;
        let q = self.config.q;
        let mut mu = NdArray::zeros(&[y.rows(), q]);
        for i in 0..y.rows() {
            mu.row_mut(i).copy_from_slice(&out.row(i)[..q]);
        }
        Ok(mu)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Evaluates `f_basis(z_i + delta_jk)` through `net`; without translation
/// invariance `delta` is ignored and the network runs once per row.
pub fn basis_values(
    net: &Mlp,
    store: &ParamStore,
    z: &NdArray,
    delta: &NdArray,
    translation_invariant: bool,
) -> Result<NdArray> {
    let (b, q) = (z.rows(), net.spec().in_dim);
    let k = net.spec().out_dim;
    if delta.ndim() != 3 || delta.shape()[1] != k || delta.shape()[2] != q {
        return Err(Error::shape("basis_values delta", &[delta.rows(), k, q], delta.shape()));
    }
    let p = delta.rows();
    let mut values = NdArray::zeros(&[b, p, k]);
    if !translation_invariant {
        let f = net.predict(store, z)?;
        let v = values.data_mut();
        for i in 0..b {
            for j in 0..p {
                v[(i * p + j) * k..(i * p + j + 1) * k].copy_from_slice(f.row(i));
            }
        }
        return Ok(values);
    }
    let mut x = Vec::with_capacity(b * p * k * q);
    let mut select = Vec::with_capacity(b * p * k);
    for i in 0..b {
        for j in 0..p {
            for kk in 0..k {
                let d = &delta.data()[(j * k + kk) * q..(j * k + kk + 1) * q];
                x.extend(z.row(i).iter().zip(d).map(|(a, b)| a + b));
                select.push(kk);
            }
        }
    }
    let f = net.predict_selected(store, &NdArray::from_vec(&[b * p * k, q], x)?, &select)?;
    values.data_mut().copy_from_slice(&f);
    Ok(values)
}

/// `lambda_jk * basis(i, j, k)`, or the basis values unchanged when
/// `scale_invariant` is false.
pub fn component_means(basis_vals: &NdArray, lambda: &NdArray, scale_invariant: bool) -> Result<NdArray> {
    if basis_vals.ndim() != 3 {
        return Err(Error::shape("component_means basis", &[0, 0, 0], basis_vals.shape()));
    }
    let (b, p, k) = (basis_vals.shape()[0], basis_vals.shape()[1], basis_vals.shape()[2]);
    lambda.ensure_shape("component_means lambda", &[p, k])?;
    if !scale_invariant {
        return Ok(basis_vals.clone());
    }
    let mut out = basis_vals.clone();
    let lam = lambda.data();
    for chunk in out.data_mut().chunks_mut(p * k).take(b) {
        for (v, &l) in chunk.iter_mut().zip(lam) {
            *v *= l;
        }
    }
    Ok(out)
}

/// ZINB parameters: means `softplus(component_means)`, dropout
/// `sigmoid(dropout_logits)` shared across components, inverse dispersion
/// `exp(noise)` shared across rows and components.
pub fn zinb_heads(dropout_logits: &NdArray, noise: &[f64], component_means: &NdArray) -> Result<ZinbHeads> {
    if component_means.ndim() != 3 {
        return Err(Error::shape("zinb_heads means", &[0, 0, 0], component_means.shape()));
    }
    let (b, p) = (component_means.shape()[0], component_means.shape()[1]);
    dropout_logits.ensure_shape("zinb_heads dropout logits", &[b, p])?;
    if noise.len() != p {
        return Err(Error::shape("zinb_heads noise", &[p], &[noise.len()]));
    }
    Ok(ZinbHeads {
        mu: component_means.map(softplus),
        dropout: dropout_logits.map(sigmoid),
        inv_dispersion: noise.iter().map(|v| v.exp()).collect(),
    })
}
