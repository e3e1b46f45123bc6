use candle_core::Tensor;
use candle_nn::Module;

use super::deformable::{AttentionTrace, DeformableCrossAttention};
use super::types::{QuerySet, Tap, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention, ParamStore};

/// Query self-attention, deformable cross-attention, feed-forward; post-norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: DeformableCrossAttention,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        points: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            cross_attn: DeformableCrossAttention::new(
                store,
                &format!("{name}.cross_attn"),
                dim,
                heads,
                points,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn_dim, dim])?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    num_heads: usize,
    num_points: usize,
}

pub struct DecoderOutput {
    pub queries: QuerySet,
    pub traces: Vec<AttentionTrace>,
}

impl Decoder {
    pub fn new(
        store: &ParamStore,
        num_layers: usize,
        dim: usize,
        heads: usize,
        points: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.{i}"), dim, heads, points, ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            num_heads: heads,
            num_points: points,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// * `query_pos`, `target`: `[B, N_q, D]`
    /// * `reference`: `[B, N_q, 2]`
    pub fn forward(
        &self,
        tokens: &TokenSequence,
        query_pos: &Tensor,
        target: &Tensor,
        reference: &Tensor,
    ) -> Result<DecoderOutput> {
        if tokens.tap != Tap::Encoder {
            return Err(Error::InvalidInput("decoder expects encoder-tap tokens".into()));
        }
        let (b, nq, _) = target.dims3()?;
        let mut traces: Vec<AttentionTrace> = (0..b)
            .map(|_| AttentionTrace::empty(nq, self.num_heads, self.num_points, tokens.grid_shape))
            .collect();
        let mut tgt = target.clone();
        for layer in &self.layers {
            let qk = (&tgt + query_pos)?;
            let attended = layer.self_attn.forward(&qk, &qk, &tgt)?;
            tgt = layer.norm1.forward(&(&tgt + attended)?)?;

            let q = (&tgt + query_pos)?;
            let cross = layer
                .cross_attn
                .forward(&q, reference, &tokens.tokens, tokens.grid_shape)?;
            tgt = layer.norm2.forward(&(&tgt + cross.output)?)?;
            for (trace, samples) in traces.iter_mut().zip(cross.samples) {
                trace.push_layer(samples)?;
            }

            let ff = layer.ffn.forward(&tgt)?;
            tgt = layer.norm3.forward(&(&tgt + ff)?)?;
        }
        Ok(DecoderOutput {
            queries: QuerySet {
                embeddings: query_pos.clone(),
                decoded: tgt,
            },
            traces,
        })
    }
}
