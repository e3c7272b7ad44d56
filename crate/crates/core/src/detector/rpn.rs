//! Region proposal head: two 1x1 convolutions shared across pyramid levels.
//!
//! Per spatial position and anchor, the box branch predicts four deltas
//! against the anchor and the objectness branch one logit. Proposals from all
//! levels are pooled, the global top `pre_nms_top_n` by objectness survive to
//! class-agnostic suppression, and at most `post_nms_top_n` come out.
//!
//! Proposal selection is treated as non-differentiable (standard practice for
//! two-stage detectors), so proposing borrows the head immutably; gradients
//! flow through the head only when it is trained directly on its raw outputs.

use std::collections::BTreeMap;

use ndarray::Array3;

use crate::config::RpnConfig;
use crate::error::{Error, Result};
use crate::nn::act::sigmoid_scalar;
use crate::nn::{Initializer, ParamTensor, Params, PointwiseConv};

use super::kernels::{anchor_boxes, decode_deltas, nms_class_agnostic, BBox};

/// A scored candidate box, clipped to the image.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub bbox: BBox,
    /// Objectness probability in (0, 1).
    pub score: f64,
}

pub struct Rpn {
    /// Box regression: channels -> 4 * anchors, bias.
    reg: PointwiseConv,
    /// Objectness: channels -> anchors, bias.
    obj: PointwiseConv,
    anchors_per_position: usize,
}

impl Rpn {
    pub fn new(in_channels: usize, anchors_per_position: usize, init: &mut Initializer) -> Self {
        Rpn {
            reg: PointwiseConv::new(in_channels, 4 * anchors_per_position, true, init),
            obj: PointwiseConv::new(in_channels, anchors_per_position, true, init),
            anchors_per_position,
        }
    }

    /// Raw per-level outputs: `(deltas, objectness logits)` with channel
    /// layouts `(4 * anchors, H, W)` and `(anchors, H, W)`. Delta channel
    /// `4a + k` is component `k` (dx, dy, dw, dh) of anchor `a`.
    pub fn forward_level(&self, map: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
        (self.reg.forward(map), self.obj.forward(map))
    }

    /// Decode, clip, and filter proposals across the whole pyramid.
    ///
    /// Candidates are ranked by objectness with ties keeping the earlier
    /// candidate (levels in stride order, then row-major cells, then anchor),
    /// so the result is deterministic.
    pub fn propose(
        &self,
        pyramid: &BTreeMap<u32, Array3<f64>>,
        cfg: &RpnConfig,
        image_w: f64,
        image_h: f64,
    ) -> Result<Vec<Proposal>> {
        if cfg.aspect_ratios.len() != self.anchors_per_position {
            return Err(Error::InvalidArgument(format!(
                "head built for {} anchors per position, config has {}",
                self.anchors_per_position,
                cfg.aspect_ratios.len()
            )));
        }
        let a = self.anchors_per_position;
        let mut boxes: Vec<BBox> = Vec::new();
        let mut scores: Vec<f64> = Vec::new();
        for (&stride, map) in pyramid {
            let (h, w) = (map.shape()[1], map.shape()[2]);
            let anchors = anchor_boxes(h, w, stride, cfg);
            let (deltas, logits) = self.forward_level(map);
            for y in 0..h {
                for x in 0..w {
                    for ai in 0..a {
                        let anchor = &anchors[(y * w + x) * a + ai];
                        let d = [
                            deltas[[4 * ai, y, x]],
                            deltas[[4 * ai + 1, y, x]],
                            deltas[[4 * ai + 2, y, x]],
                            deltas[[4 * ai + 3, y, x]],
                        ];
                        let decoded = decode_deltas(anchor, d).clip(image_w, image_h);
                        if !decoded.is_valid() {
                            continue; // collapsed after clipping
                        }
                        boxes.push(decoded);
                        scores.push(sigmoid_scalar(logits[[ai, y, x]]));
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&i, &j| {
            scores[j]
                .partial_cmp(&scores[i])
                .expect("objectness must not be NaN")
                .then(i.cmp(&j))
        });
        order.truncate(cfg.pre_nms_top_n);
        let top_boxes: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
        let top_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let kept = nms_class_agnostic(
            &top_boxes,
            &top_scores,
            cfg.nms_iou_threshold,
            cfg.post_nms_top_n,
        )?;
        Ok(kept
            .into_iter()
            .map(|i| Proposal { bbox: top_boxes[i], score: top_scores[i] })
            .collect())
    }
}

impl Params for Rpn {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        self.reg.visit_params(&crate::nn::scope(prefix, "reg"), f);
        self.obj.visit_params(&crate::nn::scope(prefix, "obj"), f);
    }
}
