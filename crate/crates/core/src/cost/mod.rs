//! Analytical parameter and FLOP accounting.
//!
//! Conventions, applied uniformly:
//! - one FLOP = one multiply-accumulate (MAC); a k x k conv producing
//!   `HxWxC_out` from `C_in` costs `H*W*k*k*C_in*C_out` FLOPs;
//! - only multiplies are counted: elementwise ops (activations, softmax,
//!   normalization divides), additions of biases, table lookups, pooling and
//!   box bookkeeping are free;
//! - params count every learnable scalar, including biases and norm
//!   scale/shift pairs.
//!
//! A network is a list of named components, each a flat list of
//! [`LayerSpec`]s; totals are exact sums over the expansion.

mod expand;
mod presets;

pub use expand::{expand_detector, expand_transformer};
pub use presets::{grid_reference, preset_report, r101f_report, GRID_R50, GRID_X101};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ArchConfig;
use crate::error::{Error, Result};

/// Shape description of one layer, sufficient to count params and FLOPs.
///
/// `batch` on conv kinds and `seq` on linear kinds multiply FLOPs but not
/// params (weights are applied repeatedly). `seq = 0` describes a layer that
/// exists (params count) but is not applied for the given input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    StandardConv {
        in_channels: u64,
        out_channels: u64,
        kernel: u64,
        out_h: u64,
        out_w: u64,
        bias: bool,
        #[serde(default = "one")]
        batch: u64,
    },
    DepthwiseConv {
        channels: u64,
        kernel: u64,
        out_h: u64,
        out_w: u64,
        bias: bool,
        #[serde(default = "one")]
        batch: u64,
    },
    PointwiseConv {
        in_channels: u64,
        out_channels: u64,
        out_h: u64,
        out_w: u64,
        bias: bool,
        #[serde(default = "one")]
        batch: u64,
    },
    Linear {
        in_dim: u64,
        out_dim: u64,
        seq: u64,
        bias: bool,
    },
    Embedding {
        vocab: u64,
        dim: u64,
    },
    /// Self-attention projections (Q, K, V, output) plus the two score/value
    /// matmuls at sequence length `seq`. Norms are separate specs.
    AttentionBlock {
        dim: u64,
        heads: u64,
        seq: u64,
    },
    /// Two-linear feed-forward `dim -> intermediate -> dim` with biases.
    FfnBlock {
        dim: u64,
        intermediate: u64,
        seq: u64,
    },
    /// Scale + shift per channel.
    Norm {
        channels: u64,
    },
    /// Bilinear RoI pooling: 4 multiplies per sample point per channel.
    RoiAlign {
        boxes: u64,
        channels: u64,
        output_size: u64,
        sampling_points: u64,
    },
    /// Greedy suppression: comparisons only, no learnable state.
    Nms {
        boxes: u64,
    },
}

fn one() -> u64 {
    1
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::StandardConv { .. } => "standard-conv",
            LayerSpec::DepthwiseConv { .. } => "depthwise-conv",
            LayerSpec::PointwiseConv { .. } => "pointwise-conv",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Embedding { .. } => "embedding",
            LayerSpec::AttentionBlock { .. } => "attention-block",
            LayerSpec::FfnBlock { .. } => "ffn-block",
            LayerSpec::Norm { .. } => "norm",
            LayerSpec::RoiAlign { .. } => "roi-align",
            LayerSpec::Nms { .. } => "nms",
        }
    }

    fn validate(&self) -> Result<()> {
        let positive: &[(&str, u64)] = match self {
            LayerSpec::StandardConv { in_channels, out_channels, kernel, out_h, out_w, batch, .. } => &[
                ("in", *in_channels),
                ("out", *out_channels),
                ("kernel", *kernel),
                ("h", *out_h),
                ("w", *out_w),
                ("batch", *batch),
            ],
            LayerSpec::DepthwiseConv { channels, kernel, out_h, out_w, batch, .. } => &[
                ("channels", *channels),
                ("kernel", *kernel),
                ("h", *out_h),
                ("w", *out_w),
                ("batch", *batch),
            ],
            LayerSpec::PointwiseConv { in_channels, out_channels, out_h, out_w, batch, .. } => &[
                ("in", *in_channels),
                ("out", *out_channels),
                ("h", *out_h),
                ("w", *out_w),
                ("batch", *batch),
            ],
            LayerSpec::Linear { in_dim, out_dim, .. } => {
                &[("in", *in_dim), ("out", *out_dim)]
            }
            LayerSpec::Embedding { vocab, dim } => &[("vocab", *vocab), ("dim", *dim)],
            LayerSpec::AttentionBlock { dim, heads, .. } => {
                if dim % heads != 0 {
                    return Err(Error::InvalidShape(format!(
                        "attention dim {dim} not divisible by heads {heads}"
                    )));
                }
                &[("dim", *dim), ("heads", *heads)]
            }
            LayerSpec::FfnBlock { dim, intermediate, .. } => {
                &[("dim", *dim), ("intermediate", *intermediate)]
            }
            LayerSpec::Norm { channels } => &[("channels", *channels)],
            LayerSpec::RoiAlign { channels, output_size, sampling_points, .. } => &[
                ("channels", *channels),
                ("output_size", *output_size),
                ("sampling", *sampling_points),
            ],
            LayerSpec::Nms { .. } => &[],
        };
        for (name, v) in positive {
            if *v == 0 {
                return Err(Error::InvalidShape(format!(
                    "{}: `{name}` must be positive",
                    self.kind()
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> u64 {
        let b = |bias: &bool| u64::from(*bias);
        match self {
            LayerSpec::StandardConv { in_channels, out_channels, kernel, bias, .. } => {
                kernel * kernel * in_channels * out_channels + b(bias) * out_channels
            }
            LayerSpec::DepthwiseConv { channels, kernel, bias, .. } => {
                kernel * kernel * channels + b(bias) * channels
            }
            LayerSpec::PointwiseConv { in_channels, out_channels, bias, .. } => {
                in_channels * out_channels + b(bias) * out_channels
            }
            LayerSpec::Linear { in_dim, out_dim, bias, .. } => {
                in_dim * out_dim + b(bias) * out_dim
            }
            LayerSpec::Embedding { vocab, dim } => vocab * dim,
            LayerSpec::AttentionBlock { dim, .. } => 4 * (dim * dim + dim),
            LayerSpec::FfnBlock { dim, intermediate, .. } => {
                dim * intermediate + intermediate + intermediate * dim + dim
            }
            LayerSpec::Norm { channels } => 2 * channels,
            LayerSpec::RoiAlign { .. } | LayerSpec::Nms { .. } => 0,
        }
    }

    pub fn flops(&self) -> u64 {
        match self {
            LayerSpec::StandardConv {
                in_channels, out_channels, kernel, out_h, out_w, batch, ..
            } => batch * out_h * out_w * kernel * kernel * in_channels * out_channels,
            LayerSpec::DepthwiseConv { channels, kernel, out_h, out_w, batch, .. } => {
                batch * out_h * out_w * kernel * kernel * channels
            }
            LayerSpec::PointwiseConv { in_channels, out_channels, out_h, out_w, batch, .. } => {
                batch * out_h * out_w * in_channels * out_channels
            }
            LayerSpec::Linear { in_dim, out_dim, seq, .. } => seq * in_dim * out_dim,
            LayerSpec::Embedding { .. } => 0,
            LayerSpec::AttentionBlock { dim, seq, .. } => {
                4 * seq * dim * dim + 2 * seq * seq * dim
            }
            LayerSpec::FfnBlock { dim, intermediate, seq } => 2 * seq * dim * intermediate,
            LayerSpec::Norm { .. } => 0,
            LayerSpec::RoiAlign { boxes, channels, output_size, sampling_points } => {
                boxes * output_size * output_size * sampling_points * sampling_points * channels * 4
            }
            LayerSpec::Nms { .. } => 0,
        }
    }

    /// Build a spec from a kind name and named shape parameters. Unknown
    /// kinds, missing parameters and extra parameters are rejected.
    pub fn from_kind_params(kind: &str, params: &BTreeMap<String, u64>) -> Result<LayerSpec> {
        struct Args<'a> {
            kind: &'static str,
            map: &'a BTreeMap<String, u64>,
            seen: Vec<&'static str>,
        }
        impl<'a> Args<'a> {
            fn take(&mut self, name: &'static str) -> Result<u64> {
                self.seen.push(name);
                self.map
                    .get(name)
                    .copied()
                    .ok_or(Error::MissingShapeParam { kind: self.kind, param: name })
            }
            fn take_or(&mut self, name: &'static str, default: u64) -> u64 {
                self.seen.push(name);
                self.map.get(name).copied().unwrap_or(default)
            }
            fn finish(self) -> Result<()> {
                for key in self.map.keys() {
                    if !self.seen.contains(&key.as_str()) {
                        return Err(Error::UnexpectedShapeParam {
                            kind: self.kind,
                            param: key.clone(),
                        });
                    }
                }
                Ok(())
            }
        }

        let kind_static: &'static str = match kind {
            "standard-conv" => "standard-conv",
            "depthwise-conv" => "depthwise-conv",
            "pointwise-conv" => "pointwise-conv",
            "linear" => "linear",
            "embedding" => "embedding",
            "attention-block" => "attention-block",
            "ffn-block" => "ffn-block",
            "norm" => "norm",
            "roi-align" => "roi-align",
            "nms" => "nms",
            other => return Err(Error::UnknownLayerKind(other.into())),
        };
        let mut a = Args { kind: kind_static, map: params, seen: Vec::new() };

        let spec = match kind_static {
            "standard-conv" => LayerSpec::StandardConv {
                in_channels: a.take("in")?,
                out_channels: a.take("out")?,
                kernel: a.take("kernel")?,
                out_h: a.take("h")?,
                out_w: a.take("w")?,
                bias: a.take_or("bias", 1) != 0,
                batch: a.take_or("batch", 1),
            },
            "depthwise-conv" => LayerSpec::DepthwiseConv {
                channels: a.take("channels")?,
                kernel: a.take("kernel")?,
                out_h: a.take("h")?,
                out_w: a.take("w")?,
                bias: a.take_or("bias", 1) != 0,
                batch: a.take_or("batch", 1),
            },
            "pointwise-conv" => LayerSpec::PointwiseConv {
                in_channels: a.take("in")?,
                out_channels: a.take("out")?,
                out_h: a.take("h")?,
                out_w: a.take("w")?,
                bias: a.take_or("bias", 1) != 0,
                batch: a.take_or("batch", 1),
            },
            "linear" => LayerSpec::Linear {
                in_dim: a.take("in")?,
                out_dim: a.take("out")?,
                seq: a.take_or("seq", 1),
                bias: a.take_or("bias", 1) != 0,
            },
            "embedding" => LayerSpec::Embedding { vocab: a.take("vocab")?, dim: a.take("dim")? },
            "attention-block" => LayerSpec::AttentionBlock {
                dim: a.take("dim")?,
                heads: a.take("heads")?,
                seq: a.take("seq")?,
            },
            "ffn-block" => LayerSpec::FfnBlock {
                dim: a.take("dim")?,
                intermediate: a.take("intermediate")?,
                seq: a.take("seq")?,
            },
            "norm" => LayerSpec::Norm { channels: a.take("channels")? },
            "roi-align" => LayerSpec::RoiAlign {
                boxes: a.take("boxes")?,
                channels: a.take("channels")?,
                output_size: a.take("output_size")?,
                sampling_points: a.take_or("sampling", 2),
            },
            "nms" => LayerSpec::Nms { boxes: a.take("boxes")? },
            _ => unreachable!(),
        };
        a.finish()?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Validated per-layer cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub params: u64,
    pub flops: u64,
}

/// Count one layer, validating its shape first.
pub fn count_layer(spec: &LayerSpec) -> Result<LayerCost> {
    spec.validate()?;
    Ok(LayerCost { params: spec.params(), flops: spec.flops() })
}

/// Cost of one named component (a group of layers).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-component and total cost of a network at a fixed input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub components: Vec<ComponentCost>,
    pub params: u64,
    pub flops: u64,
}

impl CostReport {
    pub fn from_expansion(name: &str, expansion: &[(String, Vec<LayerSpec>)]) -> Result<CostReport> {
        let mut components = Vec::with_capacity(expansion.len());
        let mut params = 0u64;
        let mut flops = 0u64;
        for (comp_name, layers) in expansion {
            let mut p = 0u64;
            let mut f = 0u64;
            for layer in layers {
                let cost = count_layer(layer)?;
                p += cost.params;
                f += cost.flops;
            }
            params += p;
            flops += f;
            components.push(ComponentCost { name: comp_name.clone(), params: p, flops: f });
        }
        Ok(CostReport { name: name.into(), components, params, flops })
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCost> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Sum of a set of components, for mapping fine-grained components onto
    /// coarser published columns.
    pub fn component_sum(&self, names: &[&str]) -> (u64, u64) {
        let mut p = 0;
        let mut f = 0;
        for c in &self.components {
            if names.contains(&c.name.as_str()) {
                p += c.params;
                f += c.flops;
            }
        }
        (p, f)
    }

    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn flops_billions(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// What the network is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputSpec {
    /// Detector input image in pixels.
    Image { height: usize, width: usize },
    /// Fusion input: region count plus total token positions (sentence,
    /// tags and specials together).
    Fusion { regions: usize, text_tokens: usize },
}

/// Expand a config at an input and count everything.
pub fn count_arch(config: &ArchConfig, input: &InputSpec) -> Result<CostReport> {
    config.validate()?;
    match (config, input) {
        (ArchConfig::Detector(cfg), InputSpec::Image { height, width }) => {
            let expansion = expand_detector(cfg, *height, *width)?;
            CostReport::from_expansion(&cfg.name, &expansion)
        }
        (ArchConfig::Transformer(cfg), InputSpec::Fusion { regions, text_tokens }) => {
            let expansion = expand_transformer(cfg, *regions, *text_tokens);
            CostReport::from_expansion(&cfg.name, &expansion)
        }
        (ArchConfig::Detector(_), _) => Err(Error::InvalidArgument(
            "detector configs take an image input spec".into(),
        )),
        (ArchConfig::Transformer(_), _) => Err(Error::InvalidArgument(
            "transformer configs take a fusion input spec".into(),
        )),
    }
}

/// Cost of a config at its natural input: native resolution for detectors,
/// the standard 50-region / 35-token scenario for transformers.
pub fn count_arch_default(config: &ArchConfig) -> Result<CostReport> {
    let input = match config {
        ArchConfig::Detector(c) => InputSpec::Image { height: c.input_height, width: c.input_width },
        ArchConfig::Transformer(_) => InputSpec::Fusion { regions: 50, text_tokens: 35 },
    };
    count_arch(config, &input)
}

/// One row of a model-to-model comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    /// params / baseline params
    pub params_ratio: f64,
    /// flops / baseline flops
    pub flops_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

/// Compare reports against the named baseline (which must be among them).
pub fn compare(reports: &[CostReport], baseline: &str) -> Result<ComparisonTable> {
    let base = reports
        .iter()
        .find(|r| r.name == baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline `{baseline}` not in report set")))?;
    if base.params == 0 || base.flops == 0 {
        return Err(Error::InvalidArgument("baseline has zero cost".into()));
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            name: r.name.clone(),
            params: r.params,
            flops: r.flops,
            params_ratio: r.params as f64 / base.params as f64,
            flops_ratio: r.flops as f64 / base.flops as f64,
        })
        .collect();
    Ok(ComparisonTable { baseline: baseline.into(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TransformerConfig;

    fn map(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn linear_counts() {
        let spec = LayerSpec::Linear { in_dim: 1024, out_dim: 1024, seq: 1, bias: true };
        let c = count_layer(&spec).unwrap();
        assert_eq!(c.params, 1_049_600);
        assert_eq!(c.flops, 1_048_576);
    }

    #[test]
    fn pointwise_conv_counts() {
        let spec = LayerSpec::PointwiseConv {
            in_channels: 64,
            out_channels: 64,
            out_h: 1,
            out_w: 1,
            bias: true,
            batch: 1,
        };
        assert_eq!(count_layer(&spec).unwrap().params, 4_160);
    }

    /// Oracle: enumerate every matmul in an attention block and sum
    /// m*n*k MACs directly, independent of the closed form.
    fn attention_macs_by_enumeration(dim: u64, heads: u64, seq: u64) -> u64 {
        let head_dim = dim / heads;
        let mut matmuls: Vec<(u64, u64, u64)> = Vec::new();
        for _ in 0..4 {
            matmuls.push((seq, dim, dim)); // Q, K, V, output projections
        }
        for _ in 0..heads {
            matmuls.push((seq, seq, head_dim)); // scores = Q K^T
            matmuls.push((seq, head_dim, seq)); // context = scores V
        }
        matmuls.iter().map(|(m, n, k)| m * n * k).sum()
    }

    #[test]
    fn attention_block_matches_mac_enumeration() {
        for (d, h, s) in [(384, 12, 85), (768, 12, 85), (312, 12, 64), (32, 4, 7)] {
            let spec = LayerSpec::AttentionBlock { dim: d, heads: h, seq: s };
            assert_eq!(
                count_layer(&spec).unwrap().flops,
                attention_macs_by_enumeration(d, h, s),
                "mismatch at d={d} h={h} s={s}"
            );
        }
        // frozen value for the standard scenario
        let spec = LayerSpec::AttentionBlock { dim: 384, heads: 12, seq: 85 };
        assert_eq!(count_layer(&spec).unwrap().flops, 55_683_840);
    }

    #[test]
    fn head_count_does_not_change_cost() {
        let a = LayerSpec::AttentionBlock { dim: 384, heads: 12, seq: 85 };
        let b = LayerSpec::AttentionBlock { dim: 384, heads: 6, seq: 85 };
        assert_eq!(count_layer(&a).unwrap(), count_layer(&b).unwrap());
    }

    #[test]
    fn from_kind_params_round_trips() {
        let spec = LayerSpec::from_kind_params(
            "linear",
            &map(&[("in", 1024), ("out", 1024), ("seq", 300), ("bias", 1)]),
        )
        .unwrap();
        assert_eq!(
            spec,
            LayerSpec::Linear { in_dim: 1024, out_dim: 1024, seq: 300, bias: true }
        );
    }

    #[test]
    fn from_kind_params_rejects_unknown_kind() {
        let err = LayerSpec::from_kind_params("dense", &map(&[("in", 4), ("out", 4)]));
        assert!(matches!(err, Err(Error::UnknownLayerKind(k)) if k == "dense"));
    }

    #[test]
    fn from_kind_params_rejects_missing_param() {
        let err = LayerSpec::from_kind_params("linear", &map(&[("in", 4)]));
        assert!(matches!(err, Err(Error::MissingShapeParam { param: "out", .. })));
    }

    #[test]
    fn from_kind_params_rejects_extras() {
        let err = LayerSpec::from_kind_params(
            "norm",
            &map(&[("channels", 4), ("kernel", 3)]),
        );
        assert!(matches!(err, Err(Error::UnexpectedShapeParam { .. })));
    }

    #[test]
    fn zero_dims_rejected() {
        let err = LayerSpec::from_kind_params("embedding", &map(&[("vocab", 0), ("dim", 4)]));
        assert!(matches!(err, Err(Error::InvalidShape(_))));
        let spec = LayerSpec::AttentionBlock { dim: 30, heads: 4, seq: 5 };
        assert!(count_layer(&spec).is_err()); // 30 % 4 != 0
    }

    #[test]
    fn report_totals_are_exact_component_sums() {
        let cfg = ArchConfig::Transformer(TransformerConfig::minilm());
        let report = count_arch_default(&cfg).unwrap();
        let p: u64 = report.components.iter().map(|c| c.params).sum();
        let f: u64 = report.components.iter().map(|c| c.flops).sum();
        assert_eq!(report.params, p);
        assert_eq!(report.flops, f);
    }

    #[test]
    fn doubling_sequence_increases_flops_only() {
        let cfg = ArchConfig::Transformer(TransformerConfig::minilm());
        let a = count_arch(&cfg, &InputSpec::Fusion { regions: 25, text_tokens: 20 }).unwrap();
        let b = count_arch(&cfg, &InputSpec::Fusion { regions: 50, text_tokens: 40 }).unwrap();
        assert_eq!(a.params, b.params);
        assert!(b.flops > a.flops);
    }

    #[test]
    fn input_family_mismatch_rejected() {
        let cfg = ArchConfig::Transformer(TransformerConfig::minilm());
        let err = count_arch(&cfg, &InputSpec::Image { height: 64, width: 64 });
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn compare_self_is_unity() {
        let a = count_arch_default(&ArchConfig::Transformer(TransformerConfig::minilm())).unwrap();
        let b =
            count_arch_default(&ArchConfig::Transformer(TransformerConfig::bert_base())).unwrap();
        let table = compare(&[a, b], "bert-base").unwrap();
        let base_row = table.rows.iter().find(|r| r.name == "bert-base").unwrap();
        assert_eq!(base_row.params_ratio, 1.0);
        assert_eq!(base_row.flops_ratio, 1.0);
        let mini_row = table.rows.iter().find(|r| r.name == "minilm").unwrap();
        assert!(mini_row.params_ratio < 1.0);
    }

    #[test]
    fn compare_missing_baseline_rejected() {
        let a = count_arch_default(&ArchConfig::Transformer(TransformerConfig::minilm())).unwrap();
        assert!(compare(&[a], "other").is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Growing any single dimension never shrinks params or FLOPs.
            #[test]
            fn monotone_in_every_dimension(
                in_dim in 1u64..64,
                out_dim in 1u64..64,
                seq in 1u64..64,
                bump in 0usize..3,
            ) {
                let base = LayerSpec::Linear { in_dim, out_dim, seq, bias: true };
                let mut grown = base.clone();
                match (&mut grown, bump) {
                    (LayerSpec::Linear { in_dim, .. }, 0) => *in_dim += 1,
                    (LayerSpec::Linear { out_dim, .. }, 1) => *out_dim += 1,
                    (LayerSpec::Linear { seq, .. }, _) => *seq += 1,
                    _ => unreachable!(),
                }
                let a = count_layer(&base).unwrap();
                let b = count_layer(&grown).unwrap();
                prop_assert!(b.params >= a.params);
                prop_assert!(b.flops >= a.flops);
            }

            #[test]
            fn conv_monotone(
                inc in 1u64..32,
                outc in 1u64..32,
                k in prop::sample::select(vec![1u64, 3, 5]),
                h in 1u64..32,
                w in 1u64..32,
                batch in 1u64..4,
                bump in 0usize..4,
            ) {
                let base = LayerSpec::StandardConv {
                    in_channels: inc, out_channels: outc, kernel: k,
                    out_h: h, out_w: w, bias: true, batch,
                };
                let mut grown = base.clone();
                match (&mut grown, bump) {
                    (LayerSpec::StandardConv { in_channels, .. }, 0) => *in_channels += 1,
                    (LayerSpec::StandardConv { out_channels, .. }, 1) => *out_channels += 1,
                    (LayerSpec::StandardConv { out_h, .. }, 2) => *out_h += 1,
                    (LayerSpec::StandardConv { batch, .. }, _) => *batch += 1,
                    _ => unreachable!(),
                }
                let a = count_layer(&base).unwrap();
                let b = count_layer(&grown).unwrap();
                prop_assert!(b.params >= a.params);
                prop_assert!(b.flops >= a.flops);
            }

            #[test]
            fn attention_monotone(
                heads in 1u64..8,
                mult in 1u64..16,
                seq in 1u64..128,
            ) {
                // keep dim divisible by heads while growing it
                let dim = heads * mult;
                let a = count_layer(&LayerSpec::AttentionBlock { dim, heads, seq }).unwrap();
                let b = count_layer(&LayerSpec::AttentionBlock { dim: dim + heads, heads, seq }).unwrap();
                let c = count_layer(&LayerSpec::AttentionBlock { dim, heads, seq: seq + 1 }).unwrap();
                prop_assert!(b.params >= a.params && b.flops >= a.flops);
                prop_assert!(c.params == a.params && c.flops >= a.flops);
            }
        }
    }
}
