//! Geometry kernels for the detector: boxes, IoU, greedy class-agnostic NMS,
//! pyramid level assignment, anchor generation, box-delta coding, and
//! quantization-free RoIAlign.
//!
//! Conventions, fixed once here and relied on by the tests' independent
//! oracles:
//! - Boxes are corner-form `(x1, y1, x2, y2)` in absolute pixels, half-open,
//!   with `area = (x2 - x1) * (y2 - y1)`.
//! - NMS is greedy highest-score-first; ties break toward the lower original
//!   index; a box is suppressed when IoU with an already-kept box exceeds the
//!   threshold.
//! - Level assignment maps a 224x224 box to stride 16 and moves one level per
//!   doubling of box side, clamped to the available strides {4..64}.
//! - RoIAlign samples a fixed grid of points per bin; a sample at box-space
//!   coordinate `p` reads the map at `u = clamp(p - 0.5, 0, n - 1)` with
//!   bilinear weights, i.e. feature cell centers sit at integer-plus-half
//!   coordinates.

use ndarray::Array3;

use crate::config::RpnConfig;
use crate::error::{Error, Result};
use crate::nn::record_muls;

use super::FPN_STRIDES;

/// Corner-form box in absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Well-formed: strictly positive extent, finite coordinates.
    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    /// Clamp into an image of the given size, preserving corner order.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Intersection over union of two corner-form boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy class-agnostic non-maximum suppression.
///
/// Returns the kept indices in descending score order (ties keep the lower
/// original index first), at most `topk` of them.
pub fn nms_class_agnostic(
    boxes: &[BBox],
    scores: &[f64],
    iou_threshold: f64,
    topk: usize,
) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(0.0 < iou_threshold && iou_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "iou threshold {iou_threshold} outside (0, 1)"
        )));
    }
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!("malformed box at index {i}: {b:?}")));
        }
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= topk {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Canonical box size mapped to stride 16 by the level heuristic.
pub const LEVEL_CANONICAL_SIZE: f64 = 224.0;
const LEVEL_CANONICAL_EXP: i32 = 4; // 2^4 = 16

/// Pick the pyramid stride for a box: one level per doubling of box side
/// relative to the 224 canonical size, clamped to the available strides.
pub fn assign_fpn_level(bbox: &BBox, image_w: f64, image_h: f64) -> Result<u32> {
    if !bbox.is_valid() || bbox.area() <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate box for level assignment: {bbox:?}"
        )));
    }
    if bbox.x2 > image_w || bbox.y2 > image_h || bbox.x1 < 0.0 || bbox.y1 < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "box {bbox:?} outside {image_w}x{image_h} image"
        )));
    }
    let k = LEVEL_CANONICAL_EXP as f64 + (bbox.area().sqrt() / LEVEL_CANONICAL_SIZE).log2();
    let k = (k.floor() as i64).clamp(2, 6); // strides 4 .. 64
    Ok(1u32 << k)
}

/// Anchor boxes for one pyramid level, centered on cell centers.
///
/// One scale per level (`anchor_scale * stride` is the anchor side) times the
/// configured aspect ratios, where an aspect ratio is height/width and the
/// anchor area is preserved across ratios. Order: row-major over cells, then
/// ratio, matching the layout of the RPN's per-anchor output channels.
pub fn anchor_boxes(level_h: usize, level_w: usize, stride: u32, rpn: &RpnConfig) -> Vec<BBox> {
    let side = rpn.anchor_scale * stride as f64;
    let mut out = Vec::with_capacity(level_h * level_w * rpn.aspect_ratios.len());
    for y in 0..level_h {
        for x in 0..level_w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &ar in &rpn.aspect_ratios {
                let w = side / ar.sqrt();
                let h = side * ar.sqrt();
                out.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
            }
        }
    }
    out
}

/// Decode RPN deltas `(dx, dy, dw, dh)` against an anchor into an absolute
/// box (unclipped).
pub fn decode_deltas(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = (anchor.x1 + aw / 2.0, anchor.y1 + ah / 2.0);
    let cx = acx + d[0] * aw;
    let cy = acy + d[1] * ah;
    let w = aw * d[2].exp();
    let h = ah * d[3].exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Encode a target box as deltas against an anchor; inverse of
/// [`decode_deltas`].
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = (anchor.x1 + aw / 2.0, anchor.y1 + ah / 2.0);
    let (tw, th) = (target.width(), target.height());
    let (tcx, tcy) = (target.x1 + tw / 2.0, target.y1 + th / 2.0);
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ]
}

fn bilinear(map: &Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let h = map.shape()[1];
    let w = map.shape()[2];
    let u = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let v = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let r0 = u.floor() as usize;
    let c0 = v.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fy = u - r0 as f64;
    let fx = v - c0 as f64;
    (1.0 - fy) * (1.0 - fx) * map[[c, r0, c0]]
        + (1.0 - fy) * fx * map[[c, r0, c1]]
        + fy * (1.0 - fx) * map[[c, r1, c0]]
        + fy * fx * map[[c, r1, c1]]
}

/// Quantization-free bilinear pooling of `map` (one pyramid level at the
/// given stride) over `bbox` into an `(C, output_size, output_size)` grid,
/// averaging `sampling_points^2` bilinear samples per bin.
pub fn roi_align(
    map: &Array3<f64>,
    bbox: &BBox,
    stride: u32,
    output_size: usize,
    sampling_points: usize,
) -> Result<Array3<f64>> {
    if !bbox.is_valid() {
        return Err(Error::InvalidArgument(format!("degenerate box {bbox:?}")));
    }
    if output_size == 0 || sampling_points == 0 {
        return Err(Error::InvalidArgument(
            "output size and sampling points must be positive".into(),
        ));
    }
    let channels = map.shape()[0];
    let s = stride as f64;
    let (bx1, by1) = (bbox.x1 / s, bbox.y1 / s);
    let (bw, bh) = (bbox.width() / s, bbox.height() / s);
    let bin_w = bw / output_size as f64;
    let bin_h = bh / output_size as f64;
    let sp = sampling_points as f64;
    // Four weight-times-value multiplies per bilinear sample per channel.
    record_muls((channels * output_size * output_size * sampling_points * sampling_points * 4) as u64);
    let mut out = Array3::zeros((channels, output_size, output_size));
    for c in 0..channels {
        for i in 0..output_size {
            for j in 0..output_size {
                let mut acc = 0.0;
                for a in 0..sampling_points {
                    for b in 0..sampling_points {
                        let y = by1 + (i as f64 + (a as f64 + 0.5) / sp) * bin_h;
                        let x = bx1 + (j as f64 + (b as f64 + 0.5) / sp) * bin_w;
                        acc += bilinear(map, c, y, x);
                    }
                }
                out[[c, i, j]] = acc / (sp * sp);
            }
        }
    }
    Ok(out)
}

/// The pyramid strides available after fusion, finest first.
pub fn available_strides() -> &'static [u32] {
    &FPN_STRIDES
}
