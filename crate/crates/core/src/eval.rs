//! Average precision at an IoU threshold, and detector evaluation on a split.

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::detr::boxes::iou;
use crate::detr::{DetectionSet, Detector, ImageTensor};
use crate::error::Result;

/// One scored box for a single class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f32,
    pub bbox: [f32; 4],
}

/// Per-detection outcome after greedy matching, in descending score order.
/// Detections are stably sorted, so equal scores keep insertion order.
pub fn match_detections(detections: &[ScoredBox], ground_truths: &[Vec<[f32; 4]>], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut used: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|i| {
            let det = &detections[i];
            let gts = &ground_truths[det.image];
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if used[det.image][j] {
                    continue;
                }
                let v = iou(det.bbox, *gt);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[det.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated area under the precision-recall curve of a
/// TP/FP sequence against `num_gt` ground-truth objects.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope: best precision at any recall at least this high
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// AP of one class: greedy matching to the highest-IoU unmatched ground
/// truth with IoU at least `iou_threshold`, then all-point interpolation.
/// `ground_truths[i]` holds the boxes of this class in image `i`.
pub fn compute_ap(detections: &[ScoredBox], ground_truths: &[Vec<[f32; 4]>], iou_threshold: f64) -> f64 {
    let num_gt = ground_truths.iter().map(Vec::len).sum();
    average_precision(&match_detections(detections, ground_truths, iou_threshold), num_gt)
}

/// Per-class AP and their mean. Classes without ground truth have no AP
/// and are left out of the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub num_images: usize,
}

/// Keeps, per query, the argmax class and its probability unless the argmax
/// is "no object". Returns `(class, score, box)` triples.
pub fn kept_detections(set: &DetectionSet) -> Vec<(usize, f32, [f32; 4])> {
    let no_object = set.no_object_class();
    set.predicted_classes()
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c != no_object)
        .map(|(q, c)| (c, set.class_scores[q][c], set.boxes[q]))
        .collect()
}

/// AP@`iou_threshold` from per-image detection sets and annotations.
pub fn evaluate_sets(
    sets: &[DetectionSet],
    truths: &[Vec<crate::detr::GroundTruthObject>],
    num_fg_classes: usize,
    iou_threshold: f64,
) -> EvalReport {
    let mut dets: Vec<Vec<ScoredBox>> = vec![Vec::new(); num_fg_classes];
    let mut gts: Vec<Vec<Vec<[f32; 4]>>> = vec![vec![Vec::new(); sets.len()]; num_fg_classes];
    for (i, (set, truth)) in sets.iter().zip(truths).enumerate() {
        for (c, score, bbox) in kept_detections(set) {
            dets[c].push(ScoredBox { image: i, score, bbox });
        }
        for o in truth {
            gts[o.category - 1][i].push(o.bbox);
        }
    }
    let per_class_ap: Vec<Option<f64>> = (0..num_fg_classes)
        .map(|c| {
            let n: usize = gts[c].iter().map(Vec::len).sum();
            (n > 0).then(|| compute_ap(&dets[c], &gts[c], iou_threshold))
        })
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    EvalReport {
        per_class_ap,
        map,
        num_images: sets.len(),
    }
}

/// Runs the detector over `images` in batches and returns host detection sets.
pub fn predict(detector: &Detector, images: &[ImageTensor], batch_size: usize) -> Result<Vec<DetectionSet>> {
    let mut sets = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = ImageTensor::batch(&refs, detector.dtype(), &candle_core::Device::Cpu)?;
        sets.extend(detector.forward(&x)?.detection_sets()?);
    }
    Ok(sets)
}

/// mAP@0.5 of `detector` on a split.
pub fn evaluate(detector: &Detector, split: &Split) -> Result<EvalReport> {
    let sets = predict(detector, &split.images, 32)?;
    let truths: Vec<_> = split.records.iter().map(|r| r.objects.clone()).collect();
    Ok(evaluate_sets(&sets, &truths, detector.config().num_fg_classes, 0.5))
}
