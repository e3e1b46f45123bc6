use candle_core::Tensor;
use candle_nn::{Linear, Module};

use super::types::{FeatureGrid, TokenSequence, Tap};
use crate::error::{Error, Result};
use crate::nn::{linear, Conv2d, ParamStore};

/// Strided 3x3 conv stack followed by ReLU after every layer. Runs channel-last.
#[derive(Debug)]
pub struct Backbone {
    layers: Vec<Conv2d>,
    stride: usize,
    out_channels: usize,
}

impl Backbone {
    pub fn new(store: &ParamStore, channels: &[usize], strides: &[usize]) -> Result<Self> {
        if channels.len() != strides.len() || channels.is_empty() {
            return Err(Error::Config(
                "backbone channels and strides must be non-empty and of equal length".into(),
            ));
        }
        let mut layers = Vec::with_capacity(channels.len());
        let mut in_ch = 3;
        for (i, (&out_ch, &s)) in channels.iter().zip(strides).enumerate() {
            layers.push(Conv2d::new(store, &format!("backbone.{i}"), in_ch, out_ch, 3, s)?);
            in_ch = out_ch;
        }
        Ok(Self {
            layers,
            stride: strides.iter().product(),
            out_channels: in_ch,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `images`: `[B, 3, H0, W0]` with `H0, W0 >= 32` and divisible by the stride.
    pub fn forward(&self, images: &Tensor) -> Result<FeatureGrid> {
        let (_, c, h0, w0) = images.dims4()?;
        if c != 3 {
            return Err(Error::Config(format!("expected 3 image channels, got {c}")));
        }
        if h0 < 32 || w0 < 32 || h0 % self.stride != 0 || w0 % self.stride != 0 {
            return Err(Error::Config(format!(
                "image {h0}x{w0} must be at least 32x32 and divisible by stride {}",
                self.stride
            )));
        }
        let mut x = images.permute((0, 2, 3, 1))?.contiguous()?;
        for layer in &self.layers {
            x = layer.forward(&x)?.relu()?;
        }
        Ok(FeatureGrid {
            features: x,
            stride: self.stride,
        })
    }
}

/// 1x1 projection to the hidden width, then flatten to a token sequence.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    proj: Linear,
}

impl Tokenizer {
    pub fn new(store: &ParamStore, in_channels: usize, hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: linear(store, "input_proj", in_channels, hidden_dim)?,
        })
    }

    /// Applies the 1x1 projection, keeping the `[B, H, W, D]` layout.
    pub fn project(&self, grid: &FeatureGrid) -> Result<Tensor> {
        Ok(self.proj.forward(&grid.features)?)
    }

    pub fn forward(&self, grid: &FeatureGrid) -> Result<TokenSequence> {
        let projected = self.project(grid)?;
        let (b, h, w, d) = projected.dims4()?;
        let tokens = projected.reshape((b, h * w, d))?;
        Ok(TokenSequence {
            pos: sine_position_encoding((h, w), d, tokens.dtype())?,
            tokens,
            grid_shape: (h, w),
            tap: Tap::Cnn,
        })
    }
}

/// Fixed 2-D sinusoidal encoding, `[H*W, dim]`: the first half encodes the
/// row, the second half the column, each as interleaved sin/cos pairs.
pub fn sine_position_encoding(
    grid_shape: (usize, usize),
    dim: usize,
    dtype: candle_core::DType,
) -> Result<Tensor> {
    let (h, w) = grid_shape;
    let half = dim / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(h * w * dim);
    for row in 0..h {
        for col in 0..w {
            for (coord, extent) in [(row, h), (col, w)] {
                let p = (coord as f64 + 0.5) / extent as f64 * two_pi;
                for k in 0..half {
                    let freq = 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
                    let v = p / freq;
                    out.push(if k % 2 == 0 { v.sin() } else { v.cos() });
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (h * w, 2 * half), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn grid_dims_follow_stride() {
        let store = ParamStore::new(0, DType::F32);
        let bb = Backbone::new(&store, &[8, 8, 8, 8], &[2, 2, 2, 1]).unwrap();
        assert_eq!(bb.stride(), 8);
        let img = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(bb.forward(&img).unwrap().grid_shape().unwrap(), (8, 8));
        let img = Tensor::zeros((2, 3, 96, 64), DType::F32, &Device::Cpu).unwrap();
        let g = bb.forward(&img).unwrap();
        assert_eq!(g.features.dims(), &[2, 12, 8, 8]);
        assert_eq!(g.grid_shape().unwrap(), (12, 8));
    }

    #[test]
    fn indivisible_image_rejected() {
        let store = ParamStore::new(0, DType::F32);
        let bb = Backbone::new(&store, &[4, 4, 4, 4], &[2, 2, 2, 1]).unwrap();
        let img = Tensor::zeros((1, 3, 60, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.forward(&img), Err(Error::Config(_))));
        let img = Tensor::zeros((1, 3, 24, 24), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.forward(&img), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_final_layer_gives_zero_grid() {
        let store = ParamStore::new(2, DType::F32);
        let bb = Backbone::new(&store, &[8, 8, 8, 16], &[2, 2, 2, 1]).unwrap();
        let w = store.get("backbone.3.weight").unwrap();
        w.set(&w.as_tensor().zeros_like().unwrap()).unwrap();
        let img = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let g = bb.forward(&img).unwrap();
        assert_eq!(g.features.dims(), &[1, 8, 8, 16]);
        assert_eq!(g.features.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn tokenize_shapes_and_round_trip() {
        let store = ParamStore::new(1, DType::F32);
        let tok = Tokenizer::new(&store, 256, 64).unwrap();
        let feats = Tensor::randn(0f32, 1.0, (1, 8, 8, 256), &Device::Cpu).unwrap();
        let grid = FeatureGrid {
            features: feats,
            stride: 8,
        };
        let seq = tok.forward(&grid).unwrap();
        assert_eq!(seq.tokens.dims(), &[1, 64, 64]);
        assert_eq!(seq.pos.dims(), &[64, 64]);
        let back = seq.to_grid().unwrap();
        let projected = tok.project(&grid).unwrap().permute((0, 3, 1, 2)).unwrap();
        let diff = (back - projected).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        // cell (2, 3) is sequence index 19
        let t19 = seq.tokens.get(0).unwrap().get(19).unwrap().to_vec1::<f32>().unwrap();
        let cell = seq.to_grid().unwrap().get(0).unwrap();
        let c23: Vec<f32> = (0..64)
            .map(|ch| cell.get(ch).unwrap().get(2).unwrap().get(3).unwrap().to_scalar::<f32>().unwrap())
            .collect();
        assert_eq!(t19, c23);
    }
}
