//! Seeded parameter storage and the small set of layers the detector and
//! discriminators are built from.
//!
//! Parameters are created through [`ParamStore`], which draws initial values
//! from a ChaCha stream so that two stores built with the same seed hold
//! bitwise-identical weights. Every layer here is composed from differentiable
//! tensor ops only.

use std::cell::RefCell;
use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Linear, Module, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub struct ParamStore {
    varmap: VarMap,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    /// All variables sorted by name, so iteration order is reproducible.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut named: Vec<(String, Var)> =
            data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        named
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        data.get(name).cloned()
    }

    fn insert(&self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let mut data = self.varmap.data().lock().expect("varmap lock poisoned");
        assert!(
            data.insert(name.to_string(), var).is_none(),
            "duplicate parameter name {name}"
        );
        Ok(out)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        drop(rng);
        self.insert(name, values, shape)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn from_values(&self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.insert(name, values, shape)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let values = (0..n)
            .map(|_| {
                // Box-Muller on the shared stream.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        drop(rng);
        self.insert(name, values, shape)
    }
}

/// Fully connected layer with the usual fan-in uniform initialisation.
pub fn linear(store: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
    let b = store.uniform(&format!("{name}.bias"), &[out_dim], bound)?;
    Ok(Linear::new(w, Some(b)))
}

/// Fully connected layer with all-zero weights and a caller-supplied bias.
pub fn linear_zero(
    store: &ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: Vec<f64>,
) -> Result<Linear> {
    assert_eq!(bias.len(), out_dim);
    let w = store.constant(&format!("{name}.weight"), &[out_dim, in_dim], 0.0)?;
    let b = store.from_values(&format!("{name}.bias"), &[out_dim], bias)?;
    Ok(Linear::new(w, Some(b)))
}

/// Square convolution on channel-last `[B, H, W, C]` tensors with
/// `(k - 1) / 2` zero padding, lowered to a row gather plus one matmul.
///
/// The weight is stored as `[k * k * C_in, C_out]` with row index
/// `(ky * k + kx) * C_in + c`.
#[derive(Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
    gather_cache: RefCell<HashMap<(usize, usize, usize), (Tensor, usize, usize)>>,
}

impl Conv2d {
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        // He-uniform for rectified activations.
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[fan_in, out_channels], bound)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_channels], 0.0)?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            in_channels,
            out_channels,
            gather_cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = (self.kernel - 1) / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    /// Row indices into the flattened input with one trailing zero row that
    /// stands in for padding.
    fn gather_index(&self, b: usize, h: usize, w: usize, device: &Device) -> Result<(Tensor, usize, usize)> {
        if let Some(hit) = self.gather_cache.borrow().get(&(b, h, w)) {
            return Ok(hit.clone());
        }
        let k = self.kernel;
        let pad = ((k - 1) / 2) as isize;
        let (oh, ow) = self.output_size(h, w);
        let zero_row = (b * h * w) as u32;
        let mut idx = Vec::with_capacity(b * oh * ow * k * k);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * self.stride + ky) as isize - pad;
                            let x = (ox * self.stride + kx) as isize - pad;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                idx.push(zero_row);
                            } else {
                                idx.push((bi * h * w + y as usize * w + x as usize) as u32);
                            }
                        }
                    }
                }
            }
        }
        let n = idx.len();
        let entry = (Tensor::from_vec(idx, n, device)?, oh, ow);
        self.gather_cache.borrow_mut().insert((b, h, w), entry.clone());
        Ok(entry)
    }

    /// `xs`: `[B, H, W, C_in]` -> `[B, OH, OW, C_out]`.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = xs.dims4()?;
        if c != self.in_channels {
            return Err(crate::error::Error::Config(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (index, oh, ow) = self.gather_index(b, h, w, xs.device())?;
        let rows = xs.reshape((b * h * w, c))?;
        let padded = Tensor::cat(&[&rows, &Tensor::zeros((1, c), xs.dtype(), xs.device())?], 0)?;
        let cols = padded
            .index_select(&index, 0)?
            .reshape((b * oh * ow, self.kernel * self.kernel * c))?;
        let out = cols.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(out.reshape((b, oh, ow, self.out_channels))?)
    }
}

/// Layer normalisation over the last dimension, written with plain tensor ops
/// so that it participates in reverse-mode differentiation.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Multi-layer perceptron with ReLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &ParamStore, name: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| linear(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Self { layers }
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = xs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Dense multi-head attention. Queries and keys may carry positional
/// encodings that the values do not.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    num_heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &ParamStore, name: &str, dim: usize, num_heads: usize) -> Result<Self> {
        assert_eq!(dim % num_heads, 0, "hidden dim must divide into heads");
        Ok(Self {
            q_proj: linear(store, &format!("{name}.q_proj"), dim, dim)?,
            k_proj: linear(store, &format!("{name}.k_proj"), dim, dim)?,
            v_proj: linear(store, &format!("{name}.v_proj"), dim, dim)?,
            out_proj: linear(store, &format!("{name}.out_proj"), dim, dim)?,
            num_heads,
            head_dim: dim / num_heads,
        })
    }

    fn split_heads(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, _) = xs.dims3()?;
        xs.reshape((b, n, self.num_heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// `query`, `key`: [B, N, D]; `value`: [B, M, D] with M = key length.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (b, n, d) = query.dims3()?;
        let q = self.split_heads(&self.q_proj.forward(query)?)?;
        let k = self.split_heads(&self.k_proj.forward(key)?)?;
        let v = self.split_heads(&self.v_proj.forward(value)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        Ok(self.out_proj.forward(&out)?)
    }
}

pub fn leaky_relu(xs: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    // max(x, slope * x) for 0 < slope < 1
    xs.maximum(&(xs * slope)?)
}

/// Inverse of the logistic function, clamped away from the poles.
pub fn inverse_sigmoid(xs: &Tensor) -> candle_core::Result<Tensor> {
    let eps = 1e-5;
    let x = xs.clamp(0.0, 1.0)?;
    let num = x.clamp(eps, 1.0)?;
    let den = (x.affine(-1.0, 1.0)?).clamp(eps, 1.0)?;
    (num / den)?.log()
}
