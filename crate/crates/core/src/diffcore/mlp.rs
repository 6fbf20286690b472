use serde::{Deserialize, Serialize};

use super::{NdArray, ParamId, ParamStore, SeededRng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Relu,
}

/// `tanh` through a single `exp`; absolute error below 1e-15, several times
/// faster than the libm routine.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => fast_tanh(x),
            Activation::Softplus => super::softplus(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            // y = ln(1 + e^x)  =>  sigmoid(x) = 1 - e^{-y}
            Activation::Softplus => -(-y).exp_m1(),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer sizes of a fully connected network. An empty `hidden_dims` gives
/// a single affine map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden_dims: &[usize], out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            hidden_dims: hidden_dims.to_vec(),
            out_dim,
            activation,
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.in_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.out_dim);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::Config(format!("MLP dimensions must be positive: {:?}", self.dims())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    fan_in: usize,
    fan_out: usize,
}

/// Fully connected network whose weights live in a [`ParamStore`].
///
/// Weights are stored `[fan_in, fan_out]`, so a batch `x` of shape
/// `[B, in]` maps to `x W + b`. The activation follows every hidden layer;
/// the output layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// Input to each layer, row-major `[rows, fan_in]`.
    inputs: Vec<Vec<f64>>,
    rows: usize,
}

impl MlpCache {
    /// Number of input rows the network was evaluated on.
    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl Mlp {
    /// Registers the layers under `prefix` with Glorot-uniform weights and
    /// zero biases.
    pub fn new(spec: MlpSpec, store: &mut ParamStore, prefix: &str, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let dims = spec.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-s, s)).collect();
            let weight = store.add(format!("{prefix}.{l}.weight"), NdArray::from_vec(&[fan_in, fan_out], data)?)?;
            let bias = store.add(format!("{prefix}.{l}.bias"), NdArray::zeros(&[fan_out]))?;
            layers.push(Layer {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        Ok(Self { spec, layers })
    }

    /// Re-binds an already-populated store (e.g. a loaded checkpoint).
    pub fn bind(spec: MlpSpec, store: &ParamStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let dims = spec.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, w) in dims.windows(2).enumerate() {
            let find = |n: String| store.id(&n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
            let weight = find(format!("{prefix}.{l}.weight"))?;
            let bias = find(format!("{prefix}.{l}.bias"))?;
            store.value(weight).ensure_shape(&format!("{prefix}.{l}.weight"), &[w[0], w[1]])?;
            store.value(bias).ensure_shape(&format!("{prefix}.{l}.bias"), &[w[1]])?;
            layers.push(Layer {
                weight,
                bias,
                fan_in: w[0],
                fan_out: w[1],
            });
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weight_id(&self, layer: usize) -> ParamId {
        self.layers[layer].weight
    }

    pub fn bias_id(&self, layer: usize) -> ParamId {
        self.layers[layer].bias
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &NdArray) -> Result<usize> {
        if x.ndim() != 2 || x.cols() != self.spec.in_dim {
            return Err(Error::shape("mlp layer 0 input", &[x.rows(), self.spec.in_dim], x.shape()));
        }
        Ok(x.rows())
    }

    /// Runs every hidden layer, returning the last hidden activation and,
    /// when `record` is set, the per-layer inputs.
    fn hidden_forward(&self, store: &ParamStore, x: &[f64], rows: usize, record: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut inputs = Vec::new();
        let mut a = x.to_vec();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut next = affine(store, layer, &a, rows);
            let act = self.spec.activation;
            next.iter_mut().for_each(|v| *v = act.apply(*v));
            if record {
                inputs.push(std::mem::replace(&mut a, next));
            } else {
                a = next;
            }
        }
        (a, inputs)
    }

    /// Forward pass with the activations needed by [`Mlp::backward`].
    pub fn forward(&self, store: &ParamStore, x: &NdArray) -> Result<(NdArray, MlpCache)> {
        let rows = self.check_input(x)?;
        let (a, mut inputs) = self.hidden_forward(store, x.data(), rows, true);
        let out = affine(store, self.layers.last().expect("at least one layer"), &a, rows);
        inputs.push(a);
        Ok((NdArray::from_vec(&[rows, self.spec.out_dim], out)?, MlpCache { inputs, rows }))
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, store: &ParamStore, x: &NdArray) -> Result<NdArray> {
        let rows = self.check_input(x)?;
        let (a, _) = self.hidden_forward(store, x.data(), rows, false);
        let out = affine(store, self.layers.last().expect("at least one layer"), &a, rows);
        NdArray::from_vec(&[rows, self.spec.out_dim], out)
    }

    /// Accumulates parameter gradients for `upstream = dLoss/dOutput` and
    /// returns `dLoss/dInput`.
    pub fn backward(&self, store: &mut ParamStore, cache: &MlpCache, upstream: &NdArray) -> Result<NdArray> {
        self.check_cache(cache)?;
        upstream.ensure_shape("mlp upstream gradient", &[cache.rows, self.spec.out_dim])?;
        let rows = cache.rows;
        let mut delta = upstream.data().to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &cache.inputs[l];
            {
                let (_, gw) = store.value_and_grad_mut(layer.weight);
                let gw = gw.data_mut();
                for r in 0..rows {
                    let ar = &a[r * layer.fan_in..(r + 1) * layer.fan_in];
                    let dr = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
                    for (h, &av) in ar.iter().enumerate() {
                        if av != 0.0 {
                            let gwr = &mut gw[h * layer.fan_out..(h + 1) * layer.fan_out];
                            for (g, &d) in gwr.iter_mut().zip(dr) {
                                *g += av * d;
                            }
                        }
                    }
                }
            }
            {
                let gb = store.grad_mut(layer.bias).data_mut();
                for r in 0..rows {
                    for (g, &d) in gb.iter_mut().zip(&delta[r * layer.fan_out..(r + 1) * layer.fan_out]) {
                        *g += d;
                    }
                }
            }
            let w = store.value(layer.weight).data();
            let mut da = vec![0.0; rows * layer.fan_in];
            for r in 0..rows {
                let dr = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
                for h in 0..layer.fan_in {
                    let wr = &w[h * layer.fan_out..(h + 1) * layer.fan_out];
                    da[r * layer.fan_in + h] = dot(dr, wr);
                }
            }
            if l > 0 {
                let act = self.spec.activation;
                for (d, &y) in da.iter_mut().zip(a) {
                    *d *= act.derivative_from_output(y);
                }
            }
            delta = da;
        }
        NdArray::from_vec(&[rows, self.spec.in_dim], delta)
    }

    /// Forward pass that only evaluates output `select[r]` for row `r`.
    ///
    /// Hidden layers are computed in full; the output layer costs one dot
    /// product per row instead of `out_dim`.
    pub fn forward_selected(&self, store: &ParamStore, x: &NdArray, select: &[usize]) -> Result<(Vec<f64>, MlpCache)> {
        let rows = self.check_input(x)?;
        self.check_select(rows, select)?;
        let (a, mut inputs) = self.hidden_forward(store, x.data(), rows, true);
        let last = self.layers.last().expect("at least one layer");
        let out = selected_affine(store, last, &a, select);
        inputs.push(a);
        Ok((out, MlpCache { inputs, rows }))
    }

    /// Output of row `r` at index `select[r]`, without recording activations.
    pub fn predict_selected(&self, store: &ParamStore, x: &NdArray, select: &[usize]) -> Result<Vec<f64>> {
        let rows = self.check_input(x)?;
        self.check_select(rows, select)?;
        let (a, _) = self.hidden_forward(store, x.data(), rows, false);
        Ok(selected_affine(store, self.layers.last().expect("at least one layer"), &a, select))
    }

    /// Backward pass matching [`Mlp::forward_selected`]; `upstream[r]` is the
    /// gradient of the selected output of row `r`.
    pub fn backward_selected(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        select: &[usize],
        upstream: &[f64],
    ) -> Result<NdArray> {
        self.check_cache(cache)?;
        self.check_select(cache.rows, select)?;
        if upstream.len() != cache.rows {
            return Err(Error::shape("mlp selected upstream", &[cache.rows], &[upstream.len()]));
        }
        let rows = cache.rows;
        let last_idx = self.layers.len() - 1;
        let last = self.layers[last_idx];
        let a = &cache.inputs[last_idx];
        let fi = last.fan_in;
        let fo = last.fan_out;
        {
            let (_, gw) = store.value_and_grad_mut(last.weight);
            let gw = gw.data_mut();
            for r in 0..rows {
                let g = upstream[r];
                if g == 0.0 {
                    continue;
                }
                let s = select[r];
                for h in 0..fi {
                    gw[h * fo + s] += a[r * fi + h] * g;
                }
            }
        }
        {
            let gb = store.grad_mut(last.bias).data_mut();
            for r in 0..rows {
                gb[select[r]] += upstream[r];
            }
        }
        let w = store.value(last.weight).data();
        let mut delta = vec![0.0; rows * fi];
        for r in 0..rows {
            let g = upstream[r];
            let s = select[r];
            for h in 0..fi {
                delta[r * fi + h] = g * w[h * fo + s];
            }
        }
        if last_idx == 0 {
            return NdArray::from_vec(&[rows, self.spec.in_dim], delta);
        }
        let act = self.spec.activation;
        for (d, &y) in delta.iter_mut().zip(a) {
            *d *= act.derivative_from_output(y);
        }
        let hidden_out = self.layers[last_idx - 1].fan_out;
        let trunk = Mlp {
            spec: MlpSpec {
                in_dim: self.spec.in_dim,
                hidden_dims: self.spec.hidden_dims[..last_idx - 1].to_vec(),
                out_dim: hidden_out,
                activation: act,
            },
            layers: self.layers[..last_idx].to_vec(),
        };
        let trunk_cache = MlpCache {
            inputs: cache.inputs[..last_idx].to_vec(),
            rows,
        };
        let upstream = NdArray::from_vec(&[rows, hidden_out], delta)?;
        trunk.backward(store, &trunk_cache, &upstream)
    }

    fn check_cache(&self, cache: &MlpCache) -> Result<()> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::MissingForward(format!(
                "cache holds {} layers, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    fn check_select(&self, rows: usize, select: &[usize]) -> Result<()> {
        if select.len() != rows {
            return Err(Error::shape("mlp output selection", &[rows], &[select.len()]));
        }
        if let Some(&s) = select.iter().find(|&&s| s >= self.spec.out_dim) {
            return Err(Error::Config(format!("selected output {s} out of range {}", self.spec.out_dim)));
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn affine(store: &ParamStore, layer: &Layer, a: &[f64], rows: usize) -> Vec<f64> {
    let w = store.value(layer.weight).data();
    let b = store.value(layer.bias).data();
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let mut out = Vec::with_capacity(rows * fo);
    for r in 0..rows {
        let start = out.len();
        out.extend_from_slice(b);
        let o = &mut out[start..];
        for (h, &av) in a[r * fi..(r + 1) * fi].iter().enumerate() {
            if av != 0.0 {
                for (ov, &wv) in o.iter_mut().zip(&w[h * fo..(h + 1) * fo]) {
                    *ov += av * wv;
                }
            }
        }
    }
    out
}

fn selected_affine(store: &ParamStore, layer: &Layer, a: &[f64], select: &[usize]) -> Vec<f64> {
    let w = store.value(layer.weight).data();
    let b = store.value(layer.bias).data();
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    select
        .iter()
        .enumerate()
        .map(|(r, &s)| {
            let ar = &a[r * fi..(r + 1) * fi];
            b[s] + ar.iter().enumerate().map(|(h, &av)| av * w[h * fo + s]).sum::<f64>()
        })
        .collect()
}
