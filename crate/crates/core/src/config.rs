//! Declarative architecture descriptions.
//!
//! An [`ArchConfig`] fully determines a network: the analytical cost model
//! expands it into layer specs, and the live modules build the same layer
//! inventory from it. Configs load from TOML and are schema-validated
//! (unknown keys are rejected, shape constraints are checked).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the normalized box encoding appended to each region feature:
/// `(x1/W, y1/H, x2/W, y2/H, w/W, h/H)`.
pub const BOX_ENCODING_DIM: usize = 6;

/// Wordpiece vocabulary size shared by every transformer preset.
pub const VOCAB_SIZE: usize = 30_522;

/// Squeeze-excitation reduction: squeeze width = block input channels / 4.
pub const SE_REDUCTION: usize = 4;

// ---------------------------------------------------------------------------
// Detector configs
// ---------------------------------------------------------------------------

/// One backbone stage: a run of inverted-bottleneck blocks.
///
/// The first block in a stage applies `stride` and switches to `channels`;
/// the remaining `repeats - 1` blocks keep stride 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub expand_ratio: usize,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub repeats: usize,
}

/// Inverted-bottleneck backbone: stem conv followed by [`StageSpec`] stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
}

const BASE_STAGES: [(usize, usize, usize, usize, usize); 7] = [
    // (expand, kernel, stride, channels, repeats)
    (1, 3, 1, 16, 1),
    (6, 3, 2, 24, 2),
    (6, 5, 2, 40, 2),
    (6, 3, 2, 80, 3),
    (6, 5, 1, 112, 3),
    (6, 5, 2, 192, 4),
    (6, 3, 1, 320, 1),
];

/// Channel rounding used by the compound-scaled backbone family.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d).floor() as usize * divisor;
    new_v = new_v.max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

impl BackboneConfig {
    /// Compound-scaled backbone: widths rounded to multiples of 8, depths
    /// rounded up. `(1.0, 1.0)` reproduces the smallest family member.
    pub fn scaled(width_mult: f64, depth_mult: f64) -> Self {
        let stages = BASE_STAGES
            .iter()
            .map(|&(expand, kernel, stride, channels, repeats)| StageSpec {
                expand_ratio: expand,
                kernel,
                stride,
                channels: make_divisible(channels as f64 * width_mult, 8),
                repeats: (repeats as f64 * depth_mult).ceil() as usize,
            })
            .collect();
        BackboneConfig {
            stem_channels: make_divisible(32.0 * width_mult, 8),
            stages,
        }
    }

    /// Small backbone for tests: same stride layout, tiny channel counts.
    pub fn toy() -> Self {
        let table = [
            (1, 3, 1, 8, 1),
            (4, 3, 2, 12, 1),
            (4, 5, 2, 16, 1),
            (4, 3, 2, 24, 2),
            (4, 3, 2, 32, 1),
        ];
        BackboneConfig {
            stem_channels: 8,
            stages: table
                .iter()
                .map(|&(e, k, s, c, r)| StageSpec {
                    expand_ratio: e,
                    kernel: k,
                    stride: s,
                    channels: c,
                    repeats: r,
                })
                .collect(),
        }
    }

    /// Cumulative stride after each stage (the stem contributes a factor 2).
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut acc = 2;
        self.stages
            .iter()
            .map(|s| {
                acc *= s.stride;
                acc
            })
            .collect()
    }

    /// Indices of the stages whose outputs feed the pyramid, one per stride
    /// in {4, 8, 16, 32}: the last stage at each of those strides.
    pub fn tap_indices(&self) -> Result<[usize; 4]> {
        let strides = self.stage_strides();
        let mut taps = [usize::MAX; 4];
        for (i, &s) in strides.iter().enumerate() {
            match s {
                4 => taps[0] = i,
                8 => taps[1] = i,
                16 => taps[2] = i,
                32 => taps[3] = i,
                _ => {}
            }
        }
        if taps.iter().any(|&t| t == usize::MAX) {
            return Err(Error::InvalidConfig(
                "backbone must produce features at strides 4, 8, 16 and 32".into(),
            ));
        }
        Ok(taps)
    }

    /// Channel width of each pyramid input tap.
    pub fn tap_channels(&self) -> Result<[usize; 4]> {
        let taps = self.tap_indices()?;
        Ok([
            self.stages[taps[0]].channels,
            self.stages[taps[1]].channels,
            self.stages[taps[2]].channels,
            self.stages[taps[3]].channels,
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::InvalidConfig("stem_channels must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.expand_ratio == 0 || s.kernel == 0 || s.channels == 0 || s.repeats == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: expand_ratio, kernel, channels and repeats must be positive"
                )));
            }
            if s.kernel % 2 == 0 {
                return Err(Error::InvalidConfig(format!("stage {i}: kernel must be odd")));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::InvalidConfig(format!("stage {i}: stride must be 1 or 2")));
            }
        }
        match self.stage_strides().last() {
            Some(32) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "backbone must end at cumulative stride 32".into(),
                ))
            }
        }
        self.tap_indices()?;
        Ok(())
    }
}

/// Feature pyramid with bidirectional fused cells over strides {4..64}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpnConfig {
    pub channels: usize,
    pub cells: usize,
}

/// Region proposal settings. The proposal head is structurally fixed to two
/// 1x1 convolutions (box regression and objectness); configs saying anything
/// else are rejected at validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpnConfig {
    #[serde(default = "default_rpn_conv_layers")]
    pub conv_layers: usize,
    #[serde(default = "default_rpn_kernel")]
    pub kernel: usize,
    /// One anchor scale per pyramid level, three aspect ratios.
    #[serde(default = "default_aspect_ratios")]
    pub aspect_ratios: Vec<f64>,
    /// Anchor side = `anchor_scale * stride` at each level.
    #[serde(default = "default_anchor_scale")]
    pub anchor_scale: f64,
    #[serde(default = "default_pre_nms_top_n")]
    pub pre_nms_top_n: usize,
    #[serde(default = "default_post_nms_top_n")]
    pub post_nms_top_n: usize,
    #[serde(default = "default_nms_iou")]
    pub nms_iou_threshold: f64,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
}

fn default_rpn_conv_layers() -> usize {
    2
}
fn default_rpn_kernel() -> usize {
    1
}
fn default_aspect_ratios() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_anchor_scale() -> f64 {
    8.0
}
fn default_pre_nms_top_n() -> usize {
    1000
}
fn default_post_nms_top_n() -> usize {
    300
}
fn default_nms_iou() -> f64 {
    0.5
}
fn default_score_threshold() -> f64 {
    0.05
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            conv_layers: default_rpn_conv_layers(),
            kernel: default_rpn_kernel(),
            aspect_ratios: default_aspect_ratios(),
            anchor_scale: default_anchor_scale(),
            pre_nms_top_n: default_pre_nms_top_n(),
            post_nms_top_n: default_post_nms_top_n(),
            nms_iou_threshold: default_nms_iou(),
            score_threshold: default_score_threshold(),
        }
    }
}

/// RoI pooling settings: bilinear alignment onto an `output_size` square grid
/// with `sampling_points`^2 samples per bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiConfig {
    #[serde(default = "default_roi_output")]
    pub output_size: usize,
    #[serde(default = "default_roi_sampling")]
    pub sampling_points: usize,
}

fn default_roi_output() -> usize {
    4
}
fn default_roi_sampling() -> usize {
    2
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            output_size: default_roi_output(),
            sampling_points: default_roi_sampling(),
        }
    }
}

/// Per-region head: exactly two linear layers over the flattened RoI window,
/// then class logits (`num_classes` + background) and, when
/// `num_attributes > 0`, attribute logits (`num_attributes` + background).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxHeadConfig {
    #[serde(default = "default_box_head_linears")]
    pub linear_layers: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_num_attributes")]
    pub num_attributes: usize,
}

fn default_box_head_linears() -> usize {
    2
}
fn default_num_attributes() -> usize {
    400
}

/// Full region-feature detector description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub name: String,
    pub input_height: usize,
    pub input_width: usize,
    pub backbone: BackboneConfig,
    pub fpn: FpnConfig,
    #[serde(default)]
    pub rpn: RpnConfig,
    #[serde(default)]
    pub roi: RoiConfig,
    pub box_head: BoxHeadConfig,
    #[serde(default = "default_max_regions")]
    pub max_regions: usize,
}

fn default_max_regions() -> usize {
    50
}

/// Pyramid strides, smallest first. The last level is an extra stride-64 map
/// downsampled from the stride-32 tap.
pub const FPN_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];

impl DetectorConfig {
    /// Compound-scaled detector family member `x` in 0..=3.
    ///
    /// Input resolution keeps a 4:3 aspect with shorter side `512 + 128*x`,
    /// both sides rounded up to multiples of 64 so every pyramid level
    /// divides evenly.
    pub fn tee(x: usize) -> Result<Self> {
        if x > 3 {
            return Err(Error::UnknownPreset(format!("tee-{x}")));
        }
        let (width, depth) = [(1.0, 1.0), (1.0, 1.1), (1.1, 1.2), (1.2, 1.4)][x];
        let (fpn_channels, fpn_cells) = [(64, 3), (88, 4), (112, 5), (160, 6)][x];
        let short = 512 + 128 * x;
        let long = (short * 4).div_ceil(3).div_ceil(64) * 64;
        Ok(DetectorConfig {
            name: format!("tee-{x}"),
            input_height: short,
            input_width: long,
            backbone: BackboneConfig::scaled(width, depth),
            fpn: FpnConfig { channels: fpn_channels, cells: fpn_cells },
            rpn: RpnConfig::default(),
            roi: RoiConfig::default(),
            box_head: BoxHeadConfig {
                linear_layers: 2,
                hidden_dim: 1024,
                feature_dim: 1024,
                num_classes: 1600,
                num_attributes: 400,
            },
            max_regions: 50,
        })
    }

    /// Tiny detector for tests: 64x64 input, narrow everything.
    pub fn toy() -> Self {
        DetectorConfig {
            name: "toy-tee".into(),
            input_height: 64,
            input_width: 64,
            backbone: BackboneConfig::toy(),
            fpn: FpnConfig { channels: 16, cells: 2 },
            rpn: RpnConfig {
                pre_nms_top_n: 200,
                post_nms_top_n: 40,
                ..RpnConfig::default()
            },
            roi: RoiConfig::default(),
            box_head: BoxHeadConfig {
                linear_layers: 2,
                hidden_dim: 32,
                feature_dim: 16,
                num_classes: 20,
                num_attributes: 5,
            },
            max_regions: 10,
        }
    }

    /// Flattened RoI window width seen by the first box-head linear layer.
    pub fn roi_flat_dim(&self) -> usize {
        self.roi.output_size * self.roi.output_size * self.fpn.channels
    }

    /// Anchors per spatial position (one scale, `aspect_ratios.len()` shapes).
    pub fn anchors_per_position(&self) -> usize {
        self.rpn.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::InvalidConfig("input size must be positive".into()));
        }
        if self.input_height % 64 != 0 || self.input_width % 64 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {}x{} must be divisible by 64 (deepest pyramid stride)",
                self.input_height, self.input_width
            )));
        }
        self.backbone.validate()?;
        if self.fpn.channels == 0 || self.fpn.cells == 0 {
            return Err(Error::InvalidConfig("fpn channels and cells must be positive".into()));
        }
        if self.rpn.conv_layers != 2 {
            return Err(Error::InvalidConfig(format!(
                "proposal head has exactly 2 conv layers, config says {}",
                self.rpn.conv_layers
            )));
        }
        if self.rpn.kernel != 1 {
            return Err(Error::InvalidConfig(format!(
                "proposal convs have kernel size 1, config says {}",
                self.rpn.kernel
            )));
        }
        if self.rpn.aspect_ratios.is_empty()
            || self.rpn.aspect_ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite())
        {
            return Err(Error::InvalidConfig("aspect ratios must be positive".into()));
        }
        if !(self.rpn.nms_iou_threshold > 0.0 && self.rpn.nms_iou_threshold < 1.0) {
            return Err(Error::InvalidConfig("nms iou threshold must be in (0, 1)".into()));
        }
        if self.rpn.pre_nms_top_n == 0 || self.rpn.post_nms_top_n == 0 {
            return Err(Error::InvalidConfig("proposal counts must be positive".into()));
        }
        if self.roi.output_size == 0 || self.roi.sampling_points == 0 {
            return Err(Error::InvalidConfig("roi output size and sampling must be positive".into()));
        }
        if self.box_head.linear_layers != 2 {
            return Err(Error::InvalidConfig(format!(
                "box head has exactly 2 linear layers, config says {}",
                self.box_head.linear_layers
            )));
        }
        if self.box_head.hidden_dim == 0
            || self.box_head.feature_dim == 0
            || self.box_head.num_classes == 0
        {
            return Err(Error::InvalidConfig("box head dims must be positive".into()));
        }
        if self.max_regions == 0 {
            return Err(Error::InvalidConfig("max_regions must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Transformer configs
// ---------------------------------------------------------------------------

/// Fusion transformer description (BERT-shaped encoder plus the fusion
/// extras: region projection, pooler, masked-token head, match head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub name: String,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    /// Segment ids: 0 = sentence, 1 = regions, 2 = tags.
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_region_feature_dim")]
    pub region_feature_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}
fn default_max_positions() -> usize {
    512
}
fn default_type_vocab() -> usize {
    3
}
fn default_region_feature_dim() -> usize {
    1024
}
fn default_dropout() -> f64 {
    0.1
}

impl TransformerConfig {
    fn shaped(name: &str, layers: usize, hidden: usize, intermediate: usize) -> Self {
        TransformerConfig {
            name: name.into(),
            layers,
            hidden,
            heads: 12,
            intermediate,
            vocab_size: default_vocab(),
            max_positions: default_max_positions(),
            type_vocab_size: default_type_vocab(),
            region_feature_dim: default_region_feature_dim(),
            dropout: default_dropout(),
        }
    }

    pub fn minilm() -> Self {
        Self::shaped("minilm", 12, 384, 1536)
    }
    pub fn bert_base() -> Self {
        Self::shaped("bert-base", 12, 768, 3072)
    }
    pub fn bert_8() -> Self {
        Self::shaped("bert-8", 8, 768, 3072)
    }
    pub fn bert_4() -> Self {
        Self::shaped("bert-4", 4, 768, 3072)
    }
    pub fn tinybert_6() -> Self {
        Self::shaped("tinybert-6", 6, 768, 3072)
    }
    pub fn tinybert_4() -> Self {
        Self::shaped("tinybert-4", 4, 312, 1200)
    }

    /// Tiny config for tests and training smoke runs.
    pub fn toy(vocab_size: usize) -> Self {
        TransformerConfig {
            name: "toy".into(),
            layers: 2,
            hidden: 32,
            heads: 4,
            intermediate: 64,
            vocab_size,
            max_positions: 64,
            type_vocab_size: 3,
            region_feature_dim: 16,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.hidden == 0
            || self.heads == 0
            || self.intermediate == 0
            || self.vocab_size == 0
            || self.max_positions == 0
            || self.type_vocab_size == 0
            || self.region_feature_dim == 0
        {
            return Err(Error::InvalidConfig("transformer dims must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.type_vocab_size < 3 {
            return Err(Error::InvalidConfig(
                "need at least 3 segment ids (sentence, regions, tags)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Unified config
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum ArchConfig {
    Detector(DetectorConfig),
    Transformer(TransformerConfig),
}

impl ArchConfig {
    pub fn name(&self) -> &str {
        match self {
            ArchConfig::Detector(c) => &c.name,
            ArchConfig::Transformer(c) => &c.name,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchConfig::Detector(c) => c.validate(),
            ArchConfig::Transformer(c) => c.validate(),
        }
    }

    /// Look up a built-in preset by name.
    pub fn preset(name: &str) -> Result<ArchConfig> {
        let cfg = match name {
            "tee-0" => ArchConfig::Detector(DetectorConfig::tee(0)?),
            "tee-1" => ArchConfig::Detector(DetectorConfig::tee(1)?),
            "tee-2" => ArchConfig::Detector(DetectorConfig::tee(2)?),
            "tee-3" => ArchConfig::Detector(DetectorConfig::tee(3)?),
            "toy-tee" => ArchConfig::Detector(DetectorConfig::toy()),
            "minilm" => ArchConfig::Transformer(TransformerConfig::minilm()),
            "bert-base" => ArchConfig::Transformer(TransformerConfig::bert_base()),
            "bert-8" => ArchConfig::Transformer(TransformerConfig::bert_8()),
            "bert-4" => ArchConfig::Transformer(TransformerConfig::bert_4()),
            "tinybert-6" => ArchConfig::Transformer(TransformerConfig::tinybert_6()),
            "tinybert-4" => ArchConfig::Transformer(TransformerConfig::tinybert_4()),
            _ => return Err(Error::UnknownPreset(name.into())),
        };
        Ok(cfg)
    }

    /// Names of the transformer presets, in the order used for reports.
    pub fn transformer_preset_names() -> &'static [&'static str] {
        &["bert-base", "bert-8", "tinybert-6", "bert-4", "minilm", "tinybert-4"]
    }

    /// Names of the detector presets, smallest first.
    pub fn detector_preset_names() -> &'static [&'static str] {
        &["tee-0", "tee-1", "tee-2", "tee-3"]
    }
}

/// On-disk config file: `kind` selects which section applies.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    kind: String,
    #[serde(default)]
    detector: Option<DetectorConfig>,
    #[serde(default)]
    transformer: Option<TransformerConfig>,
}

impl ArchConfig {
    pub fn from_toml(text: &str) -> Result<ArchConfig> {
        let file: ConfigFile = toml::from_str(text)?;
        let cfg = match file.kind.as_str() {
            "detector" => ArchConfig::Detector(file.detector.ok_or_else(|| {
                Error::InvalidConfig("kind = \"detector\" needs a [detector] section".into())
            })?),
            "transformer" => ArchConfig::Transformer(file.transformer.ok_or_else(|| {
                Error::InvalidConfig("kind = \"transformer\" needs a [transformer] section".into())
            })?),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "kind must be \"detector\" or \"transformer\", got \"{other}\""
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let file = match self {
            ArchConfig::Detector(c) => ConfigFile {
                kind: "detector".into(),
                detector: Some(c.clone()),
                transformer: None,
            },
            ArchConfig::Transformer(c) => ConfigFile {
                kind: "transformer".into(),
                detector: None,
                transformer: Some(c.clone()),
            },
        };
        toml::to_string_pretty(&file).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<ArchConfig> {
        let text = std::fs::read_to_string(path)?;
        ArchConfig::from_toml(&text)
    }
}
