//! Box geometry on normalized `(cx, cy, w, h)` boxes.

use candle_core::{Tensor, D};

pub fn cxcywh_to_xyxy(b: [f32; 4]) -> [f32; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

pub fn xyxy_to_cxcywh(b: [f32; 4]) -> [f32; 4] {
    [
        0.5 * (b[0] + b[2]),
        0.5 * (b[1] + b[3]),
        b[2] - b[0],
        b[3] - b[1],
    ]
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn to_f64(b: [f32; 4]) -> [f64; 4] {
    let c = cxcywh_to_xyxy(b);
    [c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64]
}

/// Returns `(iou, union)` for two xyxy boxes.
fn iou_union(a: [f64; 4], b: [f64; 4]) -> (f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        (0.0, union)
    } else {
        (inter / union, union)
    }
}

pub fn iou(a: [f32; 4], b: [f32; 4]) -> f64 {
    iou_union(to_f64(a), to_f64(b)).0
}

/// Generalized IoU, in `[-1, 1]`.
pub fn giou(a: [f32; 4], b: [f32; 4]) -> f64 {
    let (a, b) = (to_f64(a), to_f64(b));
    let (iou, union) = iou_union(a, b);
    let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
    let hull_area = area(hull);
    if hull_area <= 0.0 {
        return iou;
    }
    iou - (hull_area - union) / hull_area
}

pub fn l1(a: [f32; 4], b: [f32; 4]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() as f64).sum()
}

/// Row-wise generalized IoU between two `[M, 4]` cxcywh tensors; returns `[M]`.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let to_xyxy = |t: &Tensor| -> candle_core::Result<(Tensor, Tensor, Tensor, Tensor)> {
        let cx = t.narrow(D::Minus1, 0, 1)?;
        let cy = t.narrow(D::Minus1, 1, 1)?;
        let hw = (t.narrow(D::Minus1, 2, 1)? * 0.5)?;
        let hh = (t.narrow(D::Minus1, 3, 1)? * 0.5)?;
        Ok(((&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?))
    };
    let (ax0, ay0, ax1, ay1) = to_xyxy(a)?;
    let (bx0, by0, bx1, by1) = to_xyxy(b)?;
    let area_a = ((&ax1 - &ax0)?.relu()? * (&ay1 - &ay0)?.relu()?)?;
    let area_b = ((&bx1 - &bx0)?.relu()? * (&by1 - &by0)?.relu()?)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((&area_a + &area_b)? - &inter)?;
    let eps = 1e-7;
    let iou = (&inter / (&union + eps)?)?;
    let hw = (ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?.relu()?;
    let hh = (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?.relu()?;
    let hull = (hw * hh)?;
    let penalty = ((&hull - &union)? / (&hull + eps)?)?;
    (iou - penalty)?.squeeze(D::Minus1)
}
