//! Cross-attention maps reconstructed from deformable-attention traces.
//!
//! Every sampling point carries attention mass to the (up to) four integer
//! grid cells around its fractional location, with bilinear coefficients.
//! Masses are averaged over heads and decoder layers so that each query's
//! map is a probability vector over tokens. All products here are plain host
//! data: they guide the alignment losses as constants and never carry
//! gradients back into the detector.

use std::fmt::Write as _;
use std::path::Path;

use crate::detr::{AttentionTrace, DetectionSet};
use crate::error::{Error, Result};

/// Scatter `weight` from a fractional `(row, col)` location onto the integer
/// cells of an `H x W` grid. The location is clamped into the grid first.
/// Returns `(token index, mass)` pairs with nonzero mass.
pub fn bilinear_scatter(location: (f64, f64), weight: f64, grid_shape: (usize, usize)) -> Vec<(usize, f64)> {
    let (h, w) = grid_shape;
    let row = location.0.clamp(0.0, (h - 1) as f64);
    let col = location.1.clamp(0.0, (w - 1) as f64);
    let r0 = row.floor() as usize;
    let c0 = col.floor() as usize;
    let fr = row - r0 as f64;
    let fc = col - c0 as f64;
    let mut out = Vec::with_capacity(4);
    for (dr, wr) in [(0usize, 1.0 - fr), (1, fr)] {
        if wr == 0.0 {
            continue;
        }
        for (dc, wc) in [(0usize, 1.0 - fc), (1, fc)] {
            if wc == 0.0 {
                continue;
            }
            out.push(((r0 + dr) * w + c0 + dc, weight * wr * wc));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionMap {
    pub grid_shape: (usize, usize),
    pub num_queries: usize,
    /// `N_q x N_k`, row-major.
    pub per_query: Vec<f64>,
    /// Column mean of `per_query`.
    pub averaged: Vec<f64>,
}

impl CrossAttentionMap {
    pub fn num_tokens(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    pub fn query_row(&self, query: usize) -> &[f64] {
        let nk = self.num_tokens();
        &self.per_query[query * nk..(query + 1) * nk]
    }
}

pub fn compute_cam(trace: &AttentionTrace) -> Result<CrossAttentionMap> {
    if trace.num_layers == 0 || trace.samples.is_empty() {
        return Err(Error::InvalidInput("attention trace has no decoder layers".into()));
    }
    if trace.samples.len() != trace.num_layers * trace.per_layer() {
        return Err(Error::InvalidInput(format!(
            "trace holds {} samples, expected {}",
            trace.samples.len(),
            trace.num_layers * trace.per_layer()
        )));
    }
    let grid = trace.grid_shape;
    let nk = grid.0 * grid.1;
    let nq = trace.num_queries;
    let norm = 1.0 / (trace.num_layers * trace.num_heads) as f64;
    let mut per_query = vec![0.0f64; nq * nk];
    for layer in 0..trace.num_layers {
        for q in 0..nq {
            let row = &mut per_query[q * nk..(q + 1) * nk];
            for head in 0..trace.num_heads {
                for s in trace.head_samples(layer, q, head) {
                    let (r, c) = s.location(grid);
                    for (t, mass) in bilinear_scatter((r as f64, c as f64), s.weight as f64 * norm, grid) {
                        row[t] += mass;
                    }
                }
            }
        }
    }
    let mut averaged = vec![0.0f64; nk];
    for q in 0..nq {
        for (a, v) in averaged.iter_mut().zip(&per_query[q * nk..(q + 1) * nk]) {
            *a += v;
        }
    }
    for a in &mut averaged {
        *a /= nq as f64;
    }
    Ok(CrossAttentionMap {
        grid_shape: grid,
        num_queries: nq,
        per_query,
        averaged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWeights {
    pub weights: Vec<f64>,
    pub threshold: f64,
}

impl SpatialWeights {
    pub fn zeros(n: usize) -> Self {
        Self {
            weights: vec![0.0; n],
            threshold: 0.0,
        }
    }
}

/// Keep map entries at or above the map's own mean; zero the rest.
pub fn threshold_map(map: &[f64]) -> SpatialWeights {
    // a rounded mean can land just above a constant map; it never exceeds
    // the max in exact arithmetic
    let threshold = if map.is_empty() {
        0.0
    } else {
        let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (map.iter().sum::<f64>() / map.len() as f64).min(max)
    };
    SpatialWeights {
        weights: map
            .iter()
            .map(|&m| if m >= threshold { m } else { 0.0 })
            .collect(),
        threshold,
    }
}

pub fn spatial_weights(cam: &CrossAttentionMap) -> SpatialWeights {
    threshold_map(&cam.averaged)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryCam {
    pub num_classes: usize,
    /// `N_k x K`, row-major (one row per token).
    pub ccam: Vec<f64>,
    /// Queries predicted as each class.
    pub per_class_counts: Vec<usize>,
}

impl CategoryCam {
    pub fn token_row(&self, token: usize) -> &[f64] {
        &self.ccam[token * self.num_classes..(token + 1) * self.num_classes]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        self.ccam
            .chunks(self.num_classes)
            .map(|row| row[class])
            .collect()
    }
}

/// Per-class average of query maps, classes taken from the argmax over all
/// K scores (including "no object"). Empty classes get a zero column.
pub fn compute_ccam(cam: &CrossAttentionMap, pred: &DetectionSet) -> Result<CategoryCam> {
    if pred.num_queries() != cam.num_queries {
        return Err(Error::InvalidInput(format!(
            "{} predictions for a map over {} queries",
            pred.num_queries(),
            cam.num_queries
        )));
    }
    let k = pred.num_classes;
    let nk = cam.num_tokens();
    let classes = pred.predicted_classes();
    let mut counts = vec![0usize; k];
    let mut ccam = vec![0.0f64; nk * k];
    for (q, &c) in classes.iter().enumerate() {
        counts[c] += 1;
        for (t, &m) in cam.query_row(q).iter().enumerate() {
            ccam[t * k + c] += m;
        }
    }
    for t in 0..nk {
        for c in 0..k {
            if counts[c] > 0 {
                ccam[t * k + c] /= counts[c] as f64;
            }
        }
    }
    Ok(CategoryCam {
        num_classes: k,
        ccam,
        per_class_counts: counts,
    })
}

/// `H W` header, then `H` lines of `W` space-separated values.
pub fn format_grid_text(values: &[f64], grid_shape: (usize, usize)) -> String {
    let (h, w) = grid_shape;
    let mut s = format!("{h} {w}\n");
    for r in 0..h {
        let row: Vec<String> = values[r * w..(r + 1) * w].iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn parse_grid_text(text: &str, path: &Path) -> Result<((usize, usize), Vec<f64>)> {
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n');
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, 0, "missing header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path, 0, format!("bad header: {e}")))?;
    if dims.len() != 2 {
        return Err(Error::parse(path, 0, "header must be `H W`"));
    }
    let (h, w) = (dims[0], dims[1]);
    offset += header.len();
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(path, offset, format!("missing row {r}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, offset, format!("bad value in row {r}: {e}")))?;
        if row.len() != w {
            return Err(Error::parse(
                path,
                offset,
                format!("row {r} has {} values, expected {w}", row.len()),
            ));
        }
        values.extend(row);
        offset += line.len();
    }
    Ok(((h, w), values))
}

pub fn write_grid_file(path: &Path, values: &[f64], grid_shape: (usize, usize)) -> Result<()> {
    std::fs::write(path, format_grid_text(values, grid_shape)).map_err(|e| Error::io(path, e))
}

pub fn read_grid_file(path: &Path) -> Result<((usize, usize), Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid_text(&text, path)
}
