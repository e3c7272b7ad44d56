//! Config -> layer-spec expansion.
//!
//! The live modules build the same inventory from the same configs; the
//! equality of instantiated parameter counts with these expansions is
//! enforced by tests, with zero tolerance.

use crate::config::{
    DetectorConfig, TransformerConfig, BOX_ENCODING_DIM, FPN_STRIDES, SE_REDUCTION,
};
use crate::error::Result;

use super::LayerSpec;

/// Pyramid node wiring shared by the cost model and the live pyramid:
/// `(level, inputs)` for each fused node in evaluation order. Levels index
/// [`FPN_STRIDES`]. The first four are the top-down pass, the rest the
/// bottom-up pass.
pub(crate) const FPN_NODES: [(usize, usize); 8] = [
    (3, 2), // td3 = fuse(in3, up(in4))
    (2, 2), // td2 = fuse(in2, up(td3))
    (1, 2), // td1 = fuse(in1, up(td2))
    (0, 2), // out0 = fuse(in0, up(td1))
    (1, 3), // out1 = fuse(in1, td1, down(out0))
    (2, 3), // out2 = fuse(in2, td2, down(out1))
    (3, 3), // out3 = fuse(in3, td3, down(out2))
    (4, 2), // out4 = fuse(in4, down(out3))
];

fn conv_bn(specs: &mut Vec<LayerSpec>, in_ch: usize, out_ch: usize, kernel: usize, h: usize, w: usize) {
    if kernel == 1 {
        specs.push(LayerSpec::PointwiseConv {
            in_channels: in_ch as u64,
            out_channels: out_ch as u64,
            out_h: h as u64,
            out_w: w as u64,
            bias: false,
            batch: 1,
        });
    } else {
        specs.push(LayerSpec::StandardConv {
            in_channels: in_ch as u64,
            out_channels: out_ch as u64,
            kernel: kernel as u64,
            out_h: h as u64,
            out_w: w as u64,
            bias: false,
            batch: 1,
        });
    }
    specs.push(LayerSpec::Norm { channels: out_ch as u64 });
}

/// Inverted-bottleneck block: expansion pointwise (skipped when the ratio is
/// 1), depthwise, squeeze-excitation pair, projection pointwise. Norm after
/// every conv; squeeze width derives from the block input.
fn inverted_bottleneck(
    specs: &mut Vec<LayerSpec>,
    in_ch: usize,
    out_ch: usize,
    expand_ratio: usize,
    kernel: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) {
    let mid = in_ch * expand_ratio;
    if expand_ratio != 1 {
        conv_bn(specs, in_ch, mid, 1, in_h, in_w);
    }
    specs.push(LayerSpec::DepthwiseConv {
        channels: mid as u64,
        kernel: kernel as u64,
        out_h: out_h as u64,
        out_w: out_w as u64,
        bias: false,
        batch: 1,
    });
    specs.push(LayerSpec::Norm { channels: mid as u64 });
    let squeeze = (in_ch / SE_REDUCTION).max(1);
    specs.push(LayerSpec::Linear { in_dim: mid as u64, out_dim: squeeze as u64, seq: 1, bias: true });
    specs.push(LayerSpec::Linear { in_dim: squeeze as u64, out_dim: mid as u64, seq: 1, bias: true });
    conv_bn(specs, mid, out_ch, 1, out_h, out_w);
}

pub fn expand_detector(
    cfg: &DetectorConfig,
    height: usize,
    width: usize,
) -> Result<Vec<(String, Vec<LayerSpec>)>> {
    let mut backbone = Vec::new();
    let (mut h, mut w) = (height / 2, width / 2);
    backbone.push(LayerSpec::StandardConv {
        in_channels: 3,
        out_channels: cfg.backbone.stem_channels as u64,
        kernel: 3,
        out_h: h as u64,
        out_w: w as u64,
        bias: false,
        batch: 1,
    });
    backbone.push(LayerSpec::Norm { channels: cfg.backbone.stem_channels as u64 });

    let mut in_ch = cfg.backbone.stem_channels;
    let taps = cfg.backbone.tap_indices()?;
    let mut tap_dims = [(0usize, 0usize); 4];
    for (si, stage) in cfg.backbone.stages.iter().enumerate() {
        for rep in 0..stage.repeats {
            let stride = if rep == 0 { stage.stride } else { 1 };
            let (in_h, in_w) = (h, w);
            h /= stride;
            w /= stride;
            inverted_bottleneck(
                &mut backbone,
                in_ch,
                stage.channels,
                stage.expand_ratio,
                stage.kernel,
                in_h,
                in_w,
                h,
                w,
            );
            in_ch = stage.channels;
        }
        if let Some(t) = taps.iter().position(|&t| t == si) {
            tap_dims[t] = (h, w);
        }
    }

    // Pyramid: one lateral projection per tap, one extra projection feeding
    // the stride-64 level (downsampled by pooling, which is free), then
    // `cells` rounds of fused nodes. Each fused node is a weighted sum over
    // its inputs (a 1-wide linear per pixel-channel) followed by a
    // depthwise-separable conv and a norm.
    let f = cfg.fpn.channels;
    let tap_ch = cfg.backbone.tap_channels()?;
    let mut fpn = Vec::new();
    let level_dims: Vec<(usize, usize)> = FPN_STRIDES
        .iter()
        .map(|s| (height / s, width / s))
        .collect();
    for i in 0..4 {
        conv_bn(&mut fpn, tap_ch[i], f, 1, tap_dims[i].0, tap_dims[i].1);
    }
    // stride-64 input: project the stride-32 tap, pool after
    conv_bn(&mut fpn, tap_ch[3], f, 1, tap_dims[3].0, tap_dims[3].1);
    for _ in 0..cfg.fpn.cells {
        for &(level, inputs) in FPN_NODES.iter() {
            let (lh, lw) = level_dims[level];
            fpn.push(LayerSpec::Linear {
                in_dim: inputs as u64,
                out_dim: 1,
                seq: (lh * lw * f) as u64,
                bias: false,
            });
            fpn.push(LayerSpec::DepthwiseConv {
                channels: f as u64,
                kernel: 3,
                out_h: lh as u64,
                out_w: lw as u64,
                bias: false,
                batch: 1,
            });
            fpn.push(LayerSpec::PointwiseConv {
                in_channels: f as u64,
                out_channels: f as u64,
                out_h: lh as u64,
                out_w: lw as u64,
                bias: false,
                batch: 1,
            });
            fpn.push(LayerSpec::Norm { channels: f as u64 });
        }
    }

    // Proposal head: two 1x1 convs shared across levels. A 1x1 conv is
    // position-independent, so the shared application over all levels is
    // counted once over the concatenated pixels.
    let total_px: usize = level_dims.iter().map(|(lh, lw)| lh * lw).sum();
    let anchors = cfg.anchors_per_position();
    let rpn = vec![
        LayerSpec::PointwiseConv {
            in_channels: f as u64,
            out_channels: (4 * anchors) as u64,
            out_h: 1,
            out_w: total_px as u64,
            bias: true,
            batch: 1,
        },
        LayerSpec::PointwiseConv {
            in_channels: f as u64,
            out_channels: anchors as u64,
            out_h: 1,
            out_w: total_px as u64,
            bias: true,
            batch: 1,
        },
        LayerSpec::Nms { boxes: cfg.rpn.pre_nms_top_n as u64 },
    ];

    // Per-region head over the surviving proposals.
    let n_rois = cfg.rpn.post_nms_top_n as u64;
    let mut box_head = vec![
        LayerSpec::RoiAlign {
            boxes: n_rois,
            channels: f as u64,
            output_size: cfg.roi.output_size as u64,
            sampling_points: cfg.roi.sampling_points as u64,
        },
        LayerSpec::Linear {
            in_dim: cfg.roi_flat_dim() as u64,
            out_dim: cfg.box_head.hidden_dim as u64,
            seq: n_rois,
            bias: true,
        },
        LayerSpec::Linear {
            in_dim: cfg.box_head.hidden_dim as u64,
            out_dim: cfg.box_head.feature_dim as u64,
            seq: n_rois,
            bias: true,
        },
        LayerSpec::Linear {
            in_dim: cfg.box_head.feature_dim as u64,
            out_dim: (cfg.box_head.num_classes + 1) as u64,
            seq: n_rois,
            bias: true,
        },
    ];
    if cfg.box_head.num_attributes > 0 {
        box_head.push(LayerSpec::Linear {
            in_dim: cfg.box_head.feature_dim as u64,
            out_dim: (cfg.box_head.num_attributes + 1) as u64,
            seq: n_rois,
            bias: true,
        });
    }

    Ok(vec![
        ("backbone".into(), backbone),
        ("fpn".into(), fpn),
        ("rpn".into(), rpn),
        ("box_head".into(), box_head),
    ])
}

pub fn expand_transformer(
    cfg: &TransformerConfig,
    regions: usize,
    text_tokens: usize,
) -> Vec<(String, Vec<LayerSpec>)> {
    let d = cfg.hidden as u64;
    let seq = (regions + text_tokens) as u64;
    let text = text_tokens as u64;

    let embeddings = vec![
        LayerSpec::Embedding { vocab: cfg.vocab_size as u64, dim: d },
        LayerSpec::Embedding { vocab: cfg.max_positions as u64, dim: d },
        LayerSpec::Embedding { vocab: cfg.type_vocab_size as u64, dim: d },
        LayerSpec::Norm { channels: d },
    ];

    let mut encoder = Vec::with_capacity(cfg.layers * 4);
    for _ in 0..cfg.layers {
        encoder.push(LayerSpec::AttentionBlock { dim: d, heads: cfg.heads as u64, seq });
        encoder.push(LayerSpec::Norm { channels: d });
        encoder.push(LayerSpec::FfnBlock { dim: d, intermediate: cfg.intermediate as u64, seq });
        encoder.push(LayerSpec::Norm { channels: d });
    }

    let region_projection = vec![LayerSpec::Linear {
        in_dim: (cfg.region_feature_dim + BOX_ENCODING_DIM) as u64,
        out_dim: d,
        seq: regions as u64,
        bias: true,
    }];

    let pooler = vec![LayerSpec::Linear { in_dim: d, out_dim: d, seq: 1, bias: true }];

    // Masked-token head: applied at token positions only; regions are
    // never predicted.
    let mlm_head = vec![
        LayerSpec::Linear { in_dim: d, out_dim: d, seq: text, bias: true },
        LayerSpec::Norm { channels: d },
        LayerSpec::Linear { in_dim: d, out_dim: cfg.vocab_size as u64, seq: text, bias: true },
    ];

    let itm_head = vec![LayerSpec::Linear { in_dim: d, out_dim: 2, seq: 1, bias: true }];

    vec![
        ("embeddings".into(), embeddings),
        ("encoder".into(), encoder),
        ("region_projection".into(), region_projection),
        ("pooler".into(), pooler),
        ("mlm_head".into(), mlm_head),
        ("itm_head".into(), itm_head),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ArchConfig, DetectorConfig, TransformerConfig};
    use crate::cost::{count_arch, count_arch_default, InputSpec};

    #[test]
    fn transformer_components_present() {
        let exp = expand_transformer(&TransformerConfig::minilm(), 50, 35);
        let names: Vec<&str> = exp.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            ["embeddings", "encoder", "region_projection", "pooler", "mlm_head", "itm_head"]
        );
    }

    #[test]
    fn minilm_exact_counts() {
        let report =
            count_arch_default(&ArchConfig::Transformer(TransformerConfig::minilm())).unwrap();
        // frozen from the closed-form tally: embeddings 11,918,976 (word
        // 30522*384 + positions 512*384 + three 384-wide segment rows + norm),
        // encoder 12 * 1,774,464, projection (1024+6)*384 + 384, pooler,
        // mlm transform + norm + untied 30522-way decoder, 2-way match head
        assert_eq!(report.component("embeddings").unwrap().params, 11_918_976);
        assert_eq!(report.component("encoder").unwrap().params, 21_293_568);
        assert_eq!(report.component("region_projection").unwrap().params, 395_904);
        assert_eq!(report.component("pooler").unwrap().params, 147_840);
        assert_eq!(report.component("mlm_head").unwrap().params, 11_899_578);
        assert_eq!(report.component("itm_head").unwrap().params, 770);
        assert_eq!(report.params, 45_656_636);

        assert_eq!(report.component("encoder").unwrap().flops, 1_871_447_040);
        assert_eq!(report.flops, 2_306_747_904);
    }

    #[test]
    fn bert_base_exact_counts() {
        let report =
            count_arch_default(&ArchConfig::Transformer(TransformerConfig::bert_base())).unwrap();
        assert_eq!(report.params, 134_339_900);
        assert_eq!(report.flops, 8_233_835_520);
    }

    #[test]
    fn mlm_head_scales_with_text_positions_only() {
        let cfg = ArchConfig::Transformer(TransformerConfig::minilm());
        let a = count_arch(&cfg, &InputSpec::Fusion { regions: 50, text_tokens: 35 }).unwrap();
        let b = count_arch(&cfg, &InputSpec::Fusion { regions: 60, text_tokens: 35 }).unwrap();
        assert_eq!(
            a.component("mlm_head").unwrap().flops,
            b.component("mlm_head").unwrap().flops
        );
        assert!(b.component("encoder").unwrap().flops > a.component("encoder").unwrap().flops);
        assert!(
            b.component("region_projection").unwrap().flops
                > a.component("region_projection").unwrap().flops
        );
    }

    #[test]
    fn zero_regions_keeps_projection_params() {
        let cfg = ArchConfig::Transformer(TransformerConfig::minilm());
        let r = count_arch(&cfg, &InputSpec::Fusion { regions: 0, text_tokens: 35 }).unwrap();
        let proj = r.component("region_projection").unwrap();
        assert_eq!(proj.params, 395_904);
        assert_eq!(proj.flops, 0);
    }

    #[test]
    fn detector_components_present() {
        let cfg = DetectorConfig::tee(0).unwrap();
        let exp = expand_detector(&cfg, cfg.input_height, cfg.input_width).unwrap();
        let names: Vec<&str> = exp.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["backbone", "fpn", "rpn", "box_head"]);
    }

    #[test]
    fn tee0_exact_counts() {
        let report =
            count_arch_default(&ArchConfig::Detector(DetectorConfig::tee(0).unwrap())).unwrap();
        // rpn: (64*12+12) + (64*3+3) shared 1x1 convs
        assert_eq!(report.component("rpn").unwrap().params, 975);
        // box head: 1024->1024, 1024->1024, 1024->1601, 1024->401
        assert_eq!(report.component("box_head").unwrap().params, 4_151_250);
        // backbone + fpn land near 3.8M together; exact values frozen
        let (trunk_fpn_params, _) = report.component_sum(&["backbone", "fpn"]);
        assert_eq!(trunk_fpn_params, 3_763_509);
        assert_eq!(report.params, 7_915_734);
    }

    #[test]
    fn tee0_flops_in_expected_band() {
        let report =
            count_arch_default(&ArchConfig::Detector(DetectorConfig::tee(0).unwrap())).unwrap();
        let total = report.flops_billions();
        assert!((4.0..4.9).contains(&total), "tee-0 total {total} B");
        let (_, trunk_fpn) = report.component_sum(&["backbone", "fpn"]);
        let box_head = report.component("box_head").unwrap().flops;
        let rpn = report.component("rpn").unwrap().flops;
        assert!(trunk_fpn > box_head && box_head > rpn);
    }

    #[test]
    fn tee_family_params_strictly_increase() {
        let mut prev = 0;
        for x in 0..=3 {
            let cfg = ArchConfig::Detector(DetectorConfig::tee(x).unwrap());
            let report = count_arch_default(&cfg).unwrap();
            assert!(report.params > prev, "tee-{x} not larger than tee-{}", x.wrapping_sub(1));
            prev = report.params;
        }
    }

    #[test]
    fn toy_detector_expands() {
        let cfg = DetectorConfig::toy();
        let report = count_arch_default(&ArchConfig::Detector(cfg)).unwrap();
        assert!(report.params > 0 && report.flops > 0);
    }

    #[test]
    fn attribute_head_optional() {
        let mut cfg = DetectorConfig::tee(0).unwrap();
        cfg.box_head.num_attributes = 0;
        let with = count_arch_default(&ArchConfig::Detector(DetectorConfig::tee(0).unwrap())).unwrap();
        let without = count_arch_default(&ArchConfig::Detector(cfg)).unwrap();
        assert_eq!(with.params - without.params, 1024 * 401 + 401);
    }
}
