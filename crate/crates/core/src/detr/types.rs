use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image in planar channel-height-width layout with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::InvalidInput(format!(
                "image buffer holds {} values, expected 3x{height}x{width}",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; 3 * height * width],
        }
    }

    #[inline]
    pub fn index(&self, channel: usize, y: usize, x: usize) -> usize {
        (channel * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.pixels[self.index(channel, y, x)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        let i = self.index(channel, y, x);
        self.pixels[i] = v;
    }

    /// Stacks images into a `[B, 3, H, W]` tensor. All images must share a size.
    pub fn batch(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::InvalidInput(format!(
                    "mixed image sizes in batch: {}x{} vs {h}x{w}",
                    img.height, img.width
                )));
            }
            data.extend_from_slice(&img.pixels);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Backbone output at a known stride, stored channel-last as `[B, H, W, C]`.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub features: Tensor,
    pub stride: usize,
}

impl FeatureGrid {
    pub fn grid_shape(&self) -> Result<(usize, usize)> {
        let (_, h, w, _) = self.features.dims4()?;
        Ok((h, w))
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.features.dim(3)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Cnn,
    Encoder,
}

/// Flattened tokens `[B, H*W, hidden_dim]`; sequence index `t` maps to grid
/// cell `(t / W, t % W)`. The positional encoding `[H*W, hidden_dim]` rides
/// along separately and is only added at attention inputs.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub pos: Tensor,
    pub grid_shape: (usize, usize),
    pub tap: Tap,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index_of(grid_shape: (usize, usize), row: usize, col: usize) -> usize {
        row * grid_shape.1 + col
    }

    #[inline]
    pub fn cell_of(grid_shape: (usize, usize), index: usize) -> (usize, usize) {
        (index / grid_shape.1, index % grid_shape.1)
    }

    /// Reshape back to `[B, hidden_dim, H, W]`.
    pub fn to_grid(&self) -> Result<Tensor> {
        let (b, n, d) = self.tokens.dims3()?;
        let (h, w) = self.grid_shape;
        debug_assert_eq!(n, h * w);
        Ok(self.tokens.transpose(1, 2)?.reshape((b, d, h, w))?)
    }
}

/// Object query state: learned positional embeddings plus the content
/// vectors the decoder refines.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `[B, N_q, hidden_dim]`
    pub embeddings: Tensor,
    /// `[B, N_q, hidden_dim]`
    pub decoded: Tensor,
}

/// Per-image detector output detached to host memory.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub num_classes: usize,
    /// `N_q x K` probabilities; last column is "no object".
    pub class_scores: Vec<Vec<f32>>,
    /// `N_q` normalized `(cx, cy, w, h)` boxes.
    pub boxes: Vec<[f32; 4]>,
}

impl DetectionSet {
    pub fn num_queries(&self) -> usize {
        self.boxes.len()
    }

    pub fn no_object_class(&self) -> usize {
        self.num_classes - 1
    }

    /// Argmax over all K classes, lowest index on ties.
    pub fn predicted_classes(&self) -> Vec<usize> {
        self.class_scores
            .iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// One labeled object. `category` is 1-based (`1..=C_fg`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: [f32; 4],
    pub category: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub objects: Vec<GroundTruthObject>,
}

impl GroundTruthSet {
    pub fn new(objects: Vec<GroundTruthObject>) -> Self {
        Self { objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Zero-based class index used by the classification head.
    pub fn class_index(obj: &GroundTruthObject) -> usize {
        obj.category - 1
    }

    pub fn validate(&self, num_fg_classes: usize) -> Result<()> {
        for (j, o) in self.objects.iter().enumerate() {
            if o.category == 0 || o.category > num_fg_classes {
                return Err(Error::InvalidInput(format!(
                    "object {j} has category {} outside 1..={num_fg_classes}",
                    o.category
                )));
            }
            if o.bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "object {j} has box {:?} outside [0,1]",
                    o.bbox
                )));
            }
        }
        Ok(())
    }
}

/// Injective assignment from ground-truth index to query index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(gt_index, query_index)` pairs sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn query_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }

    /// Target class per query; unmatched queries get `no_object`.
    pub fn query_targets(&self, gt: &GroundTruthSet, num_queries: usize, no_object: usize) -> Vec<usize> {
        let mut targets = vec![no_object; num_queries];
        for &(j, i) in &self.pairs {
            targets[i] = GroundTruthSet::class_index(&gt.objects[j]);
        }
        targets
    }
}
