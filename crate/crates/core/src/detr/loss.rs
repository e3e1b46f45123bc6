//! Set-prediction loss: weighted cross-entropy over all queries plus
//! L1 + GIoU regression over matched pairs.

use candle_core::{DType, Tensor, D};

use super::boxes::giou_tensor;
use super::matcher::{hungarian_match, LossWeights};
use super::model::DetectorOutput;
use super::types::{GroundTruthSet, MatchResult};
use crate::error::{Error, Result};

pub struct DetectionLoss {
    pub total: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}

/// Loss for one image. `logits`: `[N_q, K]`, `boxes`: `[N_q, 4]`.
///
/// The classification term is the class-weighted mean cross-entropy
/// `sum_i w_i CE_i / sum_i w_i`, with `w = no_object` for unmatched queries
/// and 1 otherwise. The regression term sums `l1 * |b - b'|_1 +
/// giou * (1 - GIoU)` over matched pairs and divides by `max(m, 1)`.
pub fn detection_loss(
    logits: &Tensor,
    boxes: &Tensor,
    gt: &GroundTruthSet,
    matching: &MatchResult,
    weights: &LossWeights,
) -> Result<DetectionLoss> {
    ensure_finite(logits, "class logits")?;
    ensure_finite(boxes, "predicted boxes")?;
    let (nq, k) = logits.dims2()?;
    let dtype = logits.dtype();
    let device = logits.device();
    let no_object = k - 1;

    let targets = matching.query_targets(gt, nq, no_object);
    let mut wmat = vec![0f64; nq * k];
    let mut wsum = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let w = if t == no_object { weights.no_object } else { 1.0 };
        wmat[i * k + t] = w;
        wsum += w;
    }
    let wmat = Tensor::from_vec(wmat, (nq, k), device)?.to_dtype(dtype)?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let cls = ((wmat * logp)?.sum_all()? * (-1.0 / wsum))?;

    let reg = if matching.pairs.is_empty() {
        Tensor::zeros((), dtype, device)?
    } else {
        let m = matching.pairs.len();
        let qidx: Vec<u32> = matching.pairs.iter().map(|p| p.1 as u32).collect();
        let gt_boxes: Vec<f32> = matching
            .pairs
            .iter()
            .flat_map(|p| gt.objects[p.0].bbox)
            .collect();
        let qidx = Tensor::from_vec(qidx, m, device)?;
        let pred = boxes.index_select(&qidx, 0)?;
        let target = Tensor::from_vec(gt_boxes, (m, 4), device)?.to_dtype(dtype)?;
        let l1 = (&pred - &target)?.abs()?.sum_all()?;
        let giou = giou_tensor(&pred, &target)?;
        let giou_term = giou.affine(-1.0, 1.0)?.sum_all()?;
        ((l1 * weights.l1)? + (giou_term * weights.giou)?)?.affine(1.0 / m as f64, 0.0)?
    };
    let total = (&cls + &reg)?;
    Ok(DetectionLoss { total, cls, reg })
}

/// Summary of a batched detection loss.
pub struct BatchDetectionLoss {
    /// Mean over images of the per-image loss.
    pub total: Tensor,
    pub cls: f64,
    pub reg: f64,
    pub matches: Vec<MatchResult>,
}

/// Matches each image's predictions to its ground truth and averages the
/// per-image losses over the batch.
pub fn batch_detection_loss(
    out: &DetectorOutput,
    gts: &[&GroundTruthSet],
    weights: &LossWeights,
) -> Result<BatchDetectionLoss> {
    let sets = out.detection_sets()?;
    if sets.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} annotation sets",
            sets.len(),
            gts.len()
        )));
    }
    let b = sets.len();
    let mut totals = Vec::with_capacity(b);
    let (mut cls, mut reg) = (0.0, 0.0);
    let mut matches = Vec::with_capacity(b);
    for (i, (set, gt)) in sets.iter().zip(gts).enumerate() {
        let matching = hungarian_match(set, gt, weights)?;
        let loss = detection_loss(
            &out.logits.get(i)?,
            &out.boxes.get(i)?,
            gt,
            &matching,
            weights,
        )?;
        cls += loss.cls.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        reg += loss.reg.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        totals.push(loss.total);
        matches.push(matching);
    }
    let total = (Tensor::stack(&totals, 0)?.sum_all()? / b as f64)?;
    Ok(BatchDetectionLoss {
        total,
        cls: cls / b as f64,
        reg: reg / b as f64,
        matches,
    })
}
