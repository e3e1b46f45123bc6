//! Single-scale deformable cross-attention that records its sampling
//! internals.
//!
//! Each query attends to `heads x points` fractional locations around a
//! reference point. A location is `reference * (W, H) - 0.5 + offset`, in
//! grid cells, so a reference at a cell centre with zero offset lands exactly
//! on that cell. Locations are clamped to the grid before bilinear sampling.

use candle_core::{DType, Tensor, D};
use candle_nn::{Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{linear, linear_zero, ParamStore};

/// One recorded sampling point: reference `(x, y)` in `[0, 1]`, offset
/// `(dx, dy)` in grid cells, and its attention weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub reference: [f32; 2],
    pub offset: [f32; 2],
    pub weight: f32,
}

impl SamplePoint {
    /// Unclamped fractional `(row, col)` on an `H x W` grid.
    #[inline]
    pub fn location(&self, grid_shape: (usize, usize)) -> (f32, f32) {
        let row = self.reference[1] * grid_shape.0 as f32 + (-0.5) + self.offset[1];
        let col = self.reference[0] * grid_shape.1 as f32 + (-0.5) + self.offset[0];
        (row, col)
    }
}

/// Sampling record for one image across all decoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub num_layers: usize,
    pub num_queries: usize,
    pub num_heads: usize,
    pub num_points: usize,
    pub grid_shape: (usize, usize),
    /// Indexed by `((layer * N_q + query) * heads + head) * points + point`.
    pub samples: Vec<SamplePoint>,
}

impl AttentionTrace {
    pub fn empty(num_queries: usize, num_heads: usize, num_points: usize, grid_shape: (usize, usize)) -> Self {
        Self {
            num_layers: 0,
            num_queries,
            num_heads,
            num_points,
            grid_shape,
            samples: Vec::new(),
        }
    }

    pub fn per_layer(&self) -> usize {
        self.num_queries * self.num_heads * self.num_points
    }

    pub fn push_layer(&mut self, samples: Vec<SamplePoint>) -> Result<()> {
        if samples.len() != self.per_layer() {
            return Err(Error::InvalidInput(format!(
                "layer slice holds {} samples, expected {}",
                samples.len(),
                self.per_layer()
            )));
        }
        self.samples.extend(samples);
        self.num_layers += 1;
        Ok(())
    }

    #[inline]
    pub fn sample(&self, layer: usize, query: usize, head: usize, point: usize) -> &SamplePoint {
        &self.samples
            [((layer * self.num_queries + query) * self.num_heads + head) * self.num_points + point]
    }

    /// Samples of one `(layer, query, head)` triple.
    pub fn head_samples(&self, layer: usize, query: usize, head: usize) -> &[SamplePoint] {
        let start = ((layer * self.num_queries + query) * self.num_heads + head) * self.num_points;
        &self.samples[start..start + self.num_points]
    }
}

/// Bilinearly samples `value` at per-(query, head, point) locations and
/// returns the attention-weighted sum over points.
///
/// * `value`: `[B, N_k, heads, head_dim]`
/// * `rows`, `cols`, `attn`: `[B, N_q, heads, points]`
///
/// Returns `[B, N_q, heads, head_dim]`.
pub fn sample_values(
    value: &Tensor,
    rows: &Tensor,
    cols: &Tensor,
    attn: &Tensor,
    grid_shape: (usize, usize),
) -> Result<Tensor> {
    let (b, nk, heads, head_dim) = value.dims4()?;
    let (h, w) = grid_shape;
    if h * w != nk {
        return Err(Error::InvalidInput(format!(
            "grid {h}x{w} does not match {nk} tokens"
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::Config(format!("grid {h}x{w} too small for bilinear sampling")));
    }
    let (_, nq, _, points) = rows.dims4()?;
    let dtype = value.dtype();
    let device = value.device();

    let rows = rows.clamp(0.0, (h - 1) as f64)?;
    let cols = cols.clamp(0.0, (w - 1) as f64)?;
    let row_vals = rows.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let col_vals = cols.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;

    let n = row_vals.len();
    let mut y0 = Vec::with_capacity(n);
    let mut x0 = Vec::with_capacity(n);
    let mut index = vec![0u32; 4 * n];
    for (e, (&r, &c)) in row_vals.iter().zip(col_vals.iter()).enumerate() {
        let yi = (r.floor() as usize).min(h - 2);
        let xi = (c.floor() as usize).min(w - 2);
        y0.push(yi as f64);
        x0.push(xi as f64);
        // e enumerates (batch, query, head, point) in row-major order
        let head = (e / points) % heads;
        let bi = e / (nq * heads * points);
        let base = |yy: usize, xx: usize| ((bi * nk + yy * w + xx) * heads + head) as u32;
        index[e] = base(yi, xi);
        index[n + e] = base(yi, xi + 1);
        index[2 * n + e] = base(yi + 1, xi);
        index[3 * n + e] = base(yi + 1, xi + 1);
    }
    let shape = rows.shape().clone();
    let y0 = Tensor::from_vec(y0, shape.clone(), device)?.to_dtype(dtype)?;
    let x0 = Tensor::from_vec(x0, shape, device)?.to_dtype(dtype)?;
    let fy = (&rows - &y0)?;
    let fx = (&cols - &x0)?;
    let gy = fy.affine(-1.0, 1.0)?;
    let gx = fx.affine(-1.0, 1.0)?;
    let corners = Tensor::stack(&[(&gy * &gx)?, (&gy * &fx)?, (&fy * &gx)?, (&fy * &fx)?], 0)?;
    let coef = corners.broadcast_mul(&attn.unsqueeze(0)?)?;

    let index = Tensor::from_vec(index, 4 * n, device)?;
    let flat = value.reshape((b * nk * heads, head_dim))?;
    let sampled = flat
        .index_select(&index, 0)?
        .reshape((4, b, nq, heads, points, head_dim))?;
    let weighted = sampled.broadcast_mul(&coef.unsqueeze(D::Minus1)?)?;
    Ok(weighted.sum(4)?.sum(0)?)
}

#[derive(Clone, Debug)]
pub struct DeformableCrossAttention {
    value_proj: Linear,
    sampling_offsets: Linear,
    attention_weights: Linear,
    output_proj: Linear,
    num_heads: usize,
    num_points: usize,
    head_dim: usize,
}

pub struct CrossAttentionOutput {
    /// `[B, N_q, hidden_dim]`
    pub output: Tensor,
    /// One `N_q * heads * points` slice per image.
    pub samples: Vec<Vec<SamplePoint>>,
}

impl DeformableCrossAttention {
    pub fn new(
        store: &ParamStore,
        name: &str,
        dim: usize,
        num_heads: usize,
        num_points: usize,
    ) -> Result<Self> {
        // Offsets start on a star pattern: head h points along angle
        // 2*pi*h/heads, point p at distance p + 1 cells.
        let mut bias = Vec::with_capacity(num_heads * num_points * 2);
        for h in 0..num_heads {
            let theta = 2.0 * std::f64::consts::PI * h as f64 / num_heads as f64;
            let (s, c) = theta.sin_cos();
            let norm = s.abs().max(c.abs());
            for p in 0..num_points {
                bias.push(c / norm * (p + 1) as f64);
                bias.push(s / norm * (p + 1) as f64);
            }
        }
        Ok(Self {
            value_proj: linear(store, &format!("{name}.value_proj"), dim, dim)?,
            sampling_offsets: linear_zero(
                store,
                &format!("{name}.sampling_offsets"),
                dim,
                num_heads * num_points * 2,
                bias,
            )?,
            attention_weights: linear_zero(
                store,
                &format!("{name}.attention_weights"),
                dim,
                num_heads * num_points,
                vec![0.0; num_heads * num_points],
            )?,
            output_proj: linear(store, &format!("{name}.output_proj"), dim, dim)?,
            num_heads,
            num_points,
            head_dim: dim / num_heads,
        })
    }

    /// * `query`: `[B, N_q, D]` (content plus positional embedding)
    /// * `reference`: `[B, N_q, 2]` normalized `(x, y)`
    /// * `tokens`: `[B, N_k, D]` encoder tokens
    pub fn forward(
        &self,
        query: &Tensor,
        reference: &Tensor,
        tokens: &Tensor,
        grid_shape: (usize, usize),
    ) -> Result<CrossAttentionOutput> {
        let (b, nq, d) = query.dims3()?;
        let (_, nk, _) = tokens.dims3()?;
        let (heads, points) = (self.num_heads, self.num_points);

        let value = self
            .value_proj
            .forward(tokens)?
            .reshape((b, nk, heads, self.head_dim))?;
        let offsets = self
            .sampling_offsets
            .forward(query)?
            .reshape((b, nq, heads, points, 2))?;
        let logits = self
            .attention_weights
            .forward(query)?
            .reshape((b, nq, heads, points))?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;

        let (h, w) = grid_shape;
        let ref_x = reference.narrow(D::Minus1, 0, 1)?.unsqueeze(D::Minus1)?;
        let ref_y = reference.narrow(D::Minus1, 1, 1)?.unsqueeze(D::Minus1)?;
        let off_x = offsets.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
        let off_y = offsets.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
        let cols = ref_x.affine(w as f64, -0.5)?.broadcast_add(&off_x)?;
        let rows = ref_y.affine(h as f64, -0.5)?.broadcast_add(&off_y)?;

        let sampled = sample_values(&value, &rows, &cols, &attn, grid_shape)?;
        let output = self
            .output_proj
            .forward(&sampled.reshape((b, nq, d))?)?;

        let samples = record_samples(reference, &offsets, &attn, heads, points)?;
        Ok(CrossAttentionOutput { output, samples })
    }
}

fn record_samples(
    reference: &Tensor,
    offsets: &Tensor,
    attn: &Tensor,
    heads: usize,
    points: usize,
) -> Result<Vec<Vec<SamplePoint>>> {
    let (b, nq, _) = reference.dims3()?;
    let refs = reference.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let offs = offsets.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let ws = attn.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per_image = nq * heads * points;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut samples = Vec::with_capacity(per_image);
        for q in 0..nq {
            let r = [refs[(bi * nq + q) * 2], refs[(bi * nq + q) * 2 + 1]];
            for hp in 0..heads * points {
                let e = bi * per_image + q * heads * points + hp;
                samples.push(SamplePoint {
                    reference: r,
                    offset: [offs[2 * e], offs[2 * e + 1]],
                    weight: ws[e],
                });
            }
        }
        out.push(samples);
    }
    Ok(out)
}
