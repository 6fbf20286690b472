use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{clamp_log_var, NdArray};
use crate::error::{Error, Result};

/// Seeded, serialisable random stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

/// Everything needed to resume a [`SeededRng`] exactly where it stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    pub fn standard_normal(&mut self, shape: &[usize]) -> NdArray {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        NdArray::from_vec(shape, data).expect("length matches shape")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        rand::seq::SliceRandom::shuffle(items, &mut self.inner);
    }

    pub fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// `mu + exp(0.5 * clamp(log_var)) * eps` with `eps` drawn from `rng`.
pub fn reparam_sample(mu: &NdArray, log_var: &NdArray, rng: &mut SeededRng) -> Result<NdArray> {
    let eps = rng.standard_normal(mu.shape());
    reparam_with_noise(mu, log_var, &eps)
}

/// Deterministic half of the reparameterisation, for a given noise draw.
pub fn reparam_with_noise(mu: &NdArray, log_var: &NdArray, eps: &NdArray) -> Result<NdArray> {
    if mu.shape() != log_var.shape() {
        return Err(Error::shape("reparam log_var", mu.shape(), log_var.shape()));
    }
    if mu.shape() != eps.shape() {
        return Err(Error::shape("reparam noise", mu.shape(), eps.shape()));
    }
    let data = mu
        .data()
        .iter()
        .zip(log_var.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * clamp_log_var(lv)).exp() * e)
        .collect();
    NdArray::from_vec(mu.shape(), data)
}
