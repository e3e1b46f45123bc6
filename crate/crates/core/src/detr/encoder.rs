use candle_nn::Module;

use super::types::{Tap, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention, ParamStore};

/// Post-norm transformer encoder layer with dense self-attention.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn_dim, dim])?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    fn forward(&self, src: &candle_core::Tensor, pos: &candle_core::Tensor) -> Result<candle_core::Tensor> {
        let qk = src.broadcast_add(pos)?;
        let attended = self.self_attn.forward(&qk, &qk, src)?;
        let src = self.norm1.forward(&(src + attended)?)?;
        let ff = self.ffn.forward(&src)?;
        Ok(self.norm2.forward(&(src + ff)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(store: &ParamStore, num_layers: usize, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.{i}"), dim, heads, ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        if tokens.tap != Tap::Cnn {
            return Err(Error::InvalidInput("encoder expects CNN-tap tokens".into()));
        }
        let mut x = tokens.tokens.clone();
        for layer in &self.layers {
            x = layer.forward(&x, &tokens.pos)?;
        }
        Ok(TokenSequence {
            tokens: x,
            pos: tokens.pos.clone(),
            grid_shape: tokens.grid_shape,
            tap: Tap::Encoder,
        })
    }
}
