//! Cost reports for the published baseline extractors.
//!
//! The large two-stage baseline (`r101-f`) is reconstructed layer by layer
//! from its standard recipe: a 101-layer residual backbone truncated after
//! its stride-16 stage, a 3x3/512 proposal head with 9 anchors, and a
//! per-region head of 3 residual blocks at 2048 channels followed by class
//! scores and per-class box regression over 1600 classes + background.
//! Accounting assumptions (documented, not tuned): 600x800 input, 1000
//! surviving proposals, max-pooled 14x14 RoI windows (pooling is free),
//! no attribute head in the deployed path.
//!
//! The grid-feature baselines are stored as published totals only; they are
//! never re-derived.

use crate::error::Result;

use super::{ComponentCost, CostReport, LayerSpec};

/// Published totals for the stride-32 grid-feature extractor (params, FLOPs).
pub const GRID_R50: (u64, u64) = (23_500_000, 37_800_000_000);
/// Published totals for the aggregated-transform grid extractor.
pub const GRID_X101: (u64, u64) = (86_900_000, 161_200_000_000);

const R101F_INPUT: (usize, usize) = (600, 800);
const R101F_ROIS: u64 = 1000;
const R101F_CLASSES: u64 = 1601; // 1600 + background
const R101F_PRE_NMS: u64 = 6000;

struct ResStage {
    blocks: usize,
    mid: u64,
    out: u64,
    stride: usize,
}

/// Bottleneck residual block, standard layout: 1x1 reduce at input
/// resolution, 3x3 (carrying the stride), 1x1 expand; projection shortcut on
/// the first block of a stage. Norm after every conv.
fn bottleneck(
    specs: &mut Vec<LayerSpec>,
    in_ch: u64,
    mid: u64,
    out: u64,
    in_h: u64,
    in_w: u64,
    out_h: u64,
    out_w: u64,
    project: bool,
    batch: u64,
) {
    specs.push(LayerSpec::PointwiseConv {
        in_channels: in_ch,
        out_channels: mid,
        out_h: in_h,
        out_w: in_w,
        bias: false,
        batch,
    });
    specs.push(LayerSpec::Norm { channels: mid });
    specs.push(LayerSpec::StandardConv {
        in_channels: mid,
        out_channels: mid,
        kernel: 3,
        out_h,
        out_w,
        bias: false,
        batch,
    });
    specs.push(LayerSpec::Norm { channels: mid });
    specs.push(LayerSpec::PointwiseConv {
        in_channels: mid,
        out_channels: out,
        out_h,
        out_w,
        bias: false,
        batch,
    });
    specs.push(LayerSpec::Norm { channels: out });
    if project {
        specs.push(LayerSpec::PointwiseConv {
            in_channels: in_ch,
            out_channels: out,
            out_h,
            out_w,
            bias: false,
            batch,
        });
        specs.push(LayerSpec::Norm { channels: out });
    }
}

/// Layer expansion of the r101-f reference extractor.
pub fn r101f_expansion() -> Vec<(String, Vec<LayerSpec>)> {
    let (height, width) = R101F_INPUT;
    let mut backbone = Vec::new();
    let (mut h, mut w) = ((height as u64).div_ceil(2), (width as u64).div_ceil(2));
    backbone.push(LayerSpec::StandardConv {
        in_channels: 3,
        out_channels: 64,
        kernel: 7,
        out_h: h,
        out_w: w,
        bias: false,
        batch: 1,
    });
    backbone.push(LayerSpec::Norm { channels: 64 });
    // max pool to stride 4 (free)
    h = h.div_ceil(2);
    w = w.div_ceil(2);

    let stages = [
        ResStage { blocks: 3, mid: 64, out: 256, stride: 1 },
        ResStage { blocks: 4, mid: 128, out: 512, stride: 2 },
        ResStage { blocks: 23, mid: 256, out: 1024, stride: 2 },
    ];
    let mut in_ch = 64u64;
    for stage in &stages {
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride as u64 } else { 1 };
            let (in_h, in_w) = (h, w);
            h = h.div_ceil(stride);
            w = w.div_ceil(stride);
            bottleneck(&mut backbone, in_ch, stage.mid, stage.out, in_h, in_w, h, w, b == 0, 1);
            in_ch = stage.out;
        }
    }

    // Dense proposal head at stride 16: 3x3/512 then objectness (2 logits
    // per anchor) and box deltas for 9 anchors.
    let rpn = vec![
        LayerSpec::StandardConv {
            in_channels: 1024,
            out_channels: 512,
            kernel: 3,
            out_h: h,
            out_w: w,
            bias: true,
            batch: 1,
        },
        LayerSpec::PointwiseConv {
            in_channels: 512,
            out_channels: 18,
            out_h: h,
            out_w: w,
            bias: true,
            batch: 1,
        },
        LayerSpec::PointwiseConv {
            in_channels: 512,
            out_channels: 36,
            out_h: h,
            out_w: w,
            bias: true,
            batch: 1,
        },
        LayerSpec::Nms { boxes: R101F_PRE_NMS },
    ];

    // Per-region head: the final residual stage applied to max-pooled 14x14
    // windows (stride 2 inside), then class scores and per-class box deltas.
    let mut box_head = Vec::new();
    bottleneck(&mut box_head, 1024, 512, 2048, 14, 14, 7, 7, true, R101F_ROIS);
    bottleneck(&mut box_head, 2048, 512, 2048, 7, 7, 7, 7, false, R101F_ROIS);
    bottleneck(&mut box_head, 2048, 512, 2048, 7, 7, 7, 7, false, R101F_ROIS);
    box_head.push(LayerSpec::Linear {
        in_dim: 2048,
        out_dim: R101F_CLASSES,
        seq: R101F_ROIS,
        bias: true,
    });
    box_head.push(LayerSpec::Linear {
        in_dim: 2048,
        out_dim: 4 * R101F_CLASSES,
        seq: R101F_ROIS,
        bias: true,
    });

    vec![
        ("backbone".into(), backbone),
        ("rpn".into(), rpn),
        ("box_head".into(), box_head),
    ]
}

pub fn r101f_report() -> Result<CostReport> {
    CostReport::from_expansion("r101-f", &r101f_expansion())
}

fn constant_report(name: &str, totals: (u64, u64)) -> CostReport {
    CostReport {
        name: name.into(),
        components: vec![ComponentCost {
            name: "published total".into(),
            params: totals.0,
            flops: totals.1,
        }],
        params: totals.0,
        flops: totals.1,
    }
}

/// Published-totals report for the grid baselines.
pub fn grid_reference(name: &str) -> Option<CostReport> {
    match name {
        "grid-r50" => Some(constant_report("grid-r50", GRID_R50)),
        "grid-x101" => Some(constant_report("grid-x101", GRID_X101)),
        _ => None,
    }
}

/// Cost report for any known model name: detector and transformer presets at
/// their natural inputs, the reconstructed `r101-f`, or the grid constants.
pub fn preset_report(name: &str) -> Result<CostReport> {
    if name == "r101-f" {
        return r101f_report();
    }
    if let Some(report) = grid_reference(name) {
        return Ok(report);
    }
    let cfg = crate::config::ArchConfig::preset(name)?;
    super::count_arch_default(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r101f_exact_frozen_counts() {
        let r = r101f_report().unwrap();
        assert_eq!(r.component("backbone").unwrap().params, 27_535_424);
        assert_eq!(r.component("rpn").unwrap().params, 4_746_806);
        assert_eq!(r.component("box_head").unwrap().params, 31_366_981);
        assert_eq!(r.params, 63_649_211);

        assert_eq!(r.component("backbone").unwrap().flops, 67_516_928_000);
        assert_eq!(r.component("rpn").unwrap().flops, 9_017_856_000);
        assert_eq!(r.component("box_head").unwrap().flops, 825_632_768_000);
    }

    #[test]
    fn grid_rows_are_constants() {
        let r50 = grid_reference("grid-r50").unwrap();
        assert_eq!((r50.params, r50.flops), GRID_R50);
        let x101 = grid_reference("grid-x101").unwrap();
        assert_eq!((x101.params, x101.flops), GRID_X101);
        assert!(grid_reference("grid-r34").is_none());
    }

    #[test]
    fn preset_report_dispatch() {
        assert!(preset_report("minilm").is_ok());
        assert!(preset_report("tee-0").is_ok());
        assert!(preset_report("r101-f").is_ok());
        assert!(preset_report("grid-x101").is_ok());
        assert!(preset_report("vgg").is_err());
    }
}
