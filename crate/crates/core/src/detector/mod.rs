//! Region-feature detector: compound-scaled trunk, bidirectional feature
//! pyramid, shared proposal head, and a per-region head whose penultimate
//! output doubles as the visual feature handed to the fusion model.
//!
//! The pipeline for one image is
//!
//! 1. trunk taps at strides 4/8/16/32 ([`backbone`]),
//! 2. pyramid fusion to five levels including a pooled stride-64 map
//!    ([`bifpn`]),
//! 3. shared 1x1 proposal head, global top-k, class-agnostic suppression
//!    ([`rpn`]),
//! 4. per-proposal bilinear pooling from the level matching the box scale
//!    plus the two-linear head ([`boxhead`]),
//! 5. final scoring, the confidence floor, and the region cap, producing a
//!    [`RegionSet`] ([`regions`]).
//!
//! Every parameterized piece mirrors the cost model's layer inventory
//! one-to-one; tests pin the instantiated parameter count (and the
//! instrumented multiply count of the forward pass) to the cost model's
//! numbers with zero tolerance.

pub mod backbone;
pub mod bifpn;
pub mod boxhead;
pub mod kernels;
pub mod regions;
pub mod rpn;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::act::softmax_slice;
use crate::nn::init::Init;
use crate::nn::{Initializer, ParamTensor, Params};

use backbone::Backbone;
use bifpn::BiFpn;
use boxhead::BoxHead;
use kernels::{assign_fpn_level, roi_align};
use regions::{Region, RegionSet};
use rpn::Rpn;

pub use kernels::BBox;

/// Pyramid strides, finest first. The runtime twin of the cost model's
/// stride table; an agreement test keeps the two in sync.
pub const FPN_STRIDES: [u32; 5] = [4, 8, 16, 32, 64];

/// Multi-scale feature maps keyed by stride.
pub type FeaturePyramid = BTreeMap<u32, Array3<f64>>;

/// The assembled detector.
pub struct Detector {
    config: DetectorConfig,
    pub backbone: Backbone,
    pub fpn: BiFpn,
    pub rpn: Rpn,
    pub box_head: BoxHead,
    class_names: Vec<String>,
}

impl Detector {
    /// Build from a validated config. All parameters come from one seeded
    /// stream, so a `(config, seed)` pair pins every weight.
    pub fn new(config: DetectorConfig, init_kind: Init) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(init_kind);
        let backbone = Backbone::new(&config.backbone, &mut init)?;
        let fpn = BiFpn::new(&config.fpn, &config.backbone.tap_channels()?, &mut init);
        let rpn = Rpn::new(config.fpn.channels, config.anchors_per_position(), &mut init);
        let box_head = BoxHead::new(config.roi_flat_dim(), &config.box_head, &mut init);
        let class_names = (0..=config.box_head.num_classes)
            .map(|i| {
                if i == 0 {
                    "background".to_string()
                } else {
                    format!("object{i:04}")
                }
            })
            .collect();
        Ok(Detector { config, backbone, fpn, rpn, box_head, class_names })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Replace the placeholder class vocabulary (index 0 is background).
    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.config.box_head.num_classes + 1 {
            return Err(Error::InvalidArgument(format!(
                "need {} class names (including background), got {}",
                self.config.box_head.num_classes + 1,
                names.len()
            )));
        }
        self.class_names = names;
        Ok(())
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn check_image(&self, image: &Array3<f64>) -> Result<()> {
        let want = [3, self.config.input_height, self.config.input_width];
        if image.shape() != want {
            return Err(Error::InvalidShape(format!(
                "detector expects a {}x{}x{} image, got {:?}",
                want[0],
                want[1],
                want[2],
                image.shape()
            )));
        }
        Ok(())
    }

    /// Trunk taps at strides 4/8/16/32.
    pub fn forward_backbone(&self, image: &Array3<f64>) -> Result<FeaturePyramid> {
        self.check_image(image)?;
        Ok(self.backbone.forward(image))
    }

    /// Fused five-level pyramid from the trunk taps.
    pub fn fuse_pyramid(&self, taps: &FeaturePyramid) -> Result<FeaturePyramid> {
        self.fpn.forward(taps)
    }

    /// Full extraction: image in, scored/tagged/featurized regions out.
    pub fn extract_regions(&self, image: &Array3<f64>, image_id: &str) -> Result<RegionSet> {
        let (w, h) = (self.config.input_width, self.config.input_height);
        let taps = self.forward_backbone(image)?;
        let pyramid = self.fpn.forward(&taps)?;
        let proposals = self.rpn.propose(&pyramid, &self.config.rpn, w as f64, h as f64)?;

        let mut set = RegionSet {
            image_id: image_id.to_string(),
            image_width: w as u32,
            image_height: h as u32,
            feature_dim: self.box_head.feature_dim() as u32,
            regions: Vec::new(),
        };
        if proposals.is_empty() {
            return Ok(set);
        }

        let flat = self.box_head.flat_dim();
        let mut rois = Array2::zeros((proposals.len(), flat));
        for (i, p) in proposals.iter().enumerate() {
            let stride = assign_fpn_level(&p.bbox, w as f64, h as f64)?;
            let window = roi_align(
                &pyramid[&stride],
                &p.bbox,
                stride,
                self.config.roi.output_size,
                self.config.roi.sampling_points,
            )?;
            for (dst, src) in rois
                .row_mut(i)
                .iter_mut()
                .zip(window.as_slice().expect("contiguous window").iter())
            {
                *dst = *src;
            }
        }
        let out = self.box_head.forward(&rois);

        // Score each proposal by its best non-background class probability.
        let mut picks: Vec<(usize, usize, f64)> = Vec::new(); // (row, class, score)
        for (i, row) in out.class_logits.rows().into_iter().enumerate() {
            let mut probs = row.to_vec();
            softmax_slice(&mut probs);
            let (mut best, mut best_p) = (1usize, probs[1]);
            for (j, &p) in probs.iter().enumerate().skip(2) {
                if p > best_p {
                    best = j;
                    best_p = p;
                }
            }
            if best_p >= self.config.rpn.score_threshold {
                picks.push((i, best, best_p));
            }
        }
        picks.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite scores").then(a.0.cmp(&b.0)));
        picks.truncate(self.config.max_regions);

        for &(i, class, score) in &picks {
            let b = &proposals[i].bbox;
            let bbox = [b.x1 as f32, b.y1 as f32, b.x2 as f32, b.y2 as f32];
            if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
                continue; // collapsed by the f32 cast
            }
            set.regions.push(Region {
                bbox,
                score: score as f32,
                class_id: class as u16,
                tag: self.class_names[class].clone(),
                feature: out.features.row(i).iter().map(|&v| v as f32).collect(),
            });
        }
        set.validate()?;
        Ok(set)
    }
}

impl Params for Detector {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        // Prefixes deliberately match the cost model component names.
        self.backbone.visit_params(&crate::nn::scope(prefix, "backbone"), f);
        self.fpn.visit_params(&crate::nn::scope(prefix, "fpn"), f);
        self.rpn.visit_params(&crate::nn::scope(prefix, "rpn"), f);
        self.box_head.visit_params(&crate::nn::scope(prefix, "box_head"), f);
    }
}
