use candle_core::{DType, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, Tokenizer};
use super::decoder::Decoder;
use super::deformable::AttentionTrace;
use super::encoder::Encoder;
use super::types::{DetectionSet, FeatureGrid, ImageTensor, QuerySet, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{inverse_sigmoid, linear, linear_zero, Mlp, ParamStore};

/// Architecture hyperparameters of the miniature detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_points: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    /// Foreground classes; the head predicts one more for "no object".
    pub num_fg_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64, 64],
            backbone_strides: vec![2, 2, 2, 1],
            hidden_dim: 64,
            num_heads: 4,
            num_points: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 20,
            num_fg_classes: 3,
        }
    }
}

impl ModelConfig {
    /// `K`: foreground classes plus "no object".
    pub fn num_classes(&self) -> usize {
        self.num_fg_classes + 1
    }

    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(4) {
            return Err(Error::Config("hidden_dim must be divisible by 4".into()));
        }
        if self.backbone_channels.len() != self.backbone_strides.len() {
            return Err(Error::Config("backbone channels/strides length mismatch".into()));
        }
        if self.decoder_layers == 0 || self.num_queries == 0 || self.num_points == 0 {
            return Err(Error::Config(
                "decoder_layers, num_queries and num_points must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything one forward pass produces, batched over images.
pub struct DetectorOutput {
    pub feature_grid: FeatureGrid,
    pub cnn_tokens: TokenSequence,
    pub enc_tokens: TokenSequence,
    pub queries: QuerySet,
    /// `[B, N_q, K]` unnormalized class scores.
    pub logits: Tensor,
    /// `[B, N_q, 4]` sigmoid-squashed `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// One trace per image, covering every decoder layer.
    pub traces: Vec<AttentionTrace>,
}

impl DetectorOutput {
    pub fn batch_size(&self) -> usize {
        self.traces.len()
    }

    /// Host copies of softmax scores and boxes, one set per image.
    pub fn detection_sets(&self) -> Result<Vec<DetectionSet>> {
        let probs = candle_nn::ops::softmax(&self.logits, D::Minus1)?
            .to_dtype(DType::F32)?
            .to_vec3::<f32>()?;
        let boxes = self.boxes.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        Ok(probs
            .into_iter()
            .zip(boxes)
            .map(|(scores, bx)| DetectionSet {
                num_classes: scores.first().map_or(0, |r| r.len()),
                class_scores: scores,
                boxes: bx.into_iter().map(|b| [b[0], b[1], b[2], b[3]]).collect(),
            })
            .collect())
    }
}

pub struct Detector {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    tokenizer: Tokenizer,
    encoder: Encoder,
    decoder: Decoder,
    query_embed: Tensor,
    reference_head: Linear,
    class_head: Linear,
    box_head: Mlp,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let d = config.hidden_dim;
        let backbone = Backbone::new(&store, &config.backbone_channels, &config.backbone_strides)?;
        let tokenizer = Tokenizer::new(&store, backbone.out_channels(), d)?;
        let encoder = Encoder::new(&store, config.encoder_layers, d, config.num_heads, config.ffn_dim)?;
        let decoder = Decoder::new(
            &store,
            config.decoder_layers,
            d,
            config.num_heads,
            config.num_points,
            config.ffn_dim,
        )?;
        let query_embed = store.normal("query_embed", &[config.num_queries, 2 * d], 1.0)?;
        let reference_head = linear(&store, "reference_head", d, 2)?;
        let class_head = linear(&store, "class_head", d, config.num_classes())?;
        // Zero-initialized last box layer: boxes start centred on their
        // reference points with a moderate size.
        let box_head = Mlp::from_layers(vec![
            linear(&store, "box_head.0", d, d)?,
            linear(&store, "box_head.1", d, d)?,
            linear_zero(&store, "box_head.2", d, 4, vec![0.0, 0.0, -1.0, -1.0])?,
        ]);
        Ok(Self {
            config,
            store,
            backbone,
            tokenizer,
            encoder,
            decoder,
            query_embed,
            reference_head,
            class_head,
            box_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn images_to_tensor(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        ImageTensor::batch(images, self.dtype(), self.store.device())
    }

    /// `[B, N_q, D]` positional and content halves of the query embedding,
    /// plus `[B, N_q, 2]` reference points.
    fn query_inputs(&self, batch: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let d = self.config.hidden_dim;
        let nq = self.config.num_queries;
        let pos = self
            .query_embed
            .narrow(1, 0, d)?
            .unsqueeze(0)?
            .broadcast_as((batch, nq, d))?
            .contiguous()?;
        let tgt = self
            .query_embed
            .narrow(1, d, d)?
            .unsqueeze(0)?
            .broadcast_as((batch, nq, d))?
            .contiguous()?;
        let reference = candle_nn::ops::sigmoid(&self.reference_head.forward(&pos)?)?;
        Ok((pos, tgt, reference))
    }

    /// `images`: `[B, 3, H0, W0]`.
    pub fn forward(&self, images: &Tensor) -> Result<DetectorOutput> {
        let feature_grid = self.backbone.forward(images)?;
        let cnn_tokens = self.tokenizer.forward(&feature_grid)?;
        let enc_tokens = self.encoder.forward(&cnn_tokens)?;
        let batch = images.dim(0)?;
        let (query_pos, target, reference) = self.query_inputs(batch)?;
        let decoded = self
            .decoder
            .forward(&enc_tokens, &query_pos, &target, &reference)?;

        let hs = &decoded.queries.decoded;
        let logits = self.class_head.forward(hs)?;
        let raw = self.box_head.forward(hs)?;
        let shift = Tensor::cat(
            &[inverse_sigmoid(&reference)?, reference.zeros_like()?],
            D::Minus1,
        )?;
        let boxes = candle_nn::ops::sigmoid(&(raw + shift)?)?;
        Ok(DetectorOutput {
            feature_grid,
            cnn_tokens,
            enc_tokens,
            queries: decoded.queries,
            logits,
            boxes,
            traces: decoded.traces,
        })
    }
}
