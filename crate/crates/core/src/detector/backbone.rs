//! Detector trunk: a stem convolution followed by stages of inverted
//! bottleneck blocks (pointwise expansion, depthwise convolution,
//! squeeze-excitation gate, pointwise projection), tapping the last feature
//! map at each of strides 4, 8, 16, and 32.
//!
//! Normalization is the inference-form per-channel affine throughout; the
//! smooth gating activation (`x * sigmoid(x)`) follows every non-projection
//! convolution. Blocks with stride 1 and matching channel counts carry a
//! residual skip.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};

use crate::config::{BackboneConfig, SE_REDUCTION};
use crate::error::Result;
use crate::nn::act::{swish_grad_scalar, swish_scalar};
use crate::nn::conv::{Conv2dCache, DepthwiseCache, PointwiseCache};
use crate::nn::linear::LinearCache;
use crate::nn::norm::ChannelAffineCache;
use crate::nn::{
    ChannelAffine, Conv2d, DepthwiseConv, Initializer, Linear, ParamTensor, Params, PointwiseConv,
};

/// One inverted bottleneck block.
pub struct MbConvBlock {
    expand: Option<(PointwiseConv, ChannelAffine)>,
    dw: DepthwiseConv,
    dw_norm: ChannelAffine,
    se_reduce: Linear,
    se_expand: Linear,
    project: PointwiseConv,
    proj_norm: ChannelAffine,
    skip: bool,
}

pub struct SeCache {
    /// Post-activation depthwise output entering the gate.
    gated_input: Array3<f64>,
    reduce_cache: LinearCache,
    reduce_pre: Array2<f64>,
    expand_cache: LinearCache,
    /// Per-channel gate values.
    gate: Array1<f64>,
}

pub struct MbCache {
    out_shape: (usize, usize, usize),
    expand: Option<(PointwiseCache, ChannelAffineCache, Array3<f64>)>,
    dw_cache: DepthwiseCache,
    dw_norm_cache: ChannelAffineCache,
    dw_pre: Array3<f64>,
    se: SeCache,
    project_cache: PointwiseCache,
    proj_norm_cache: ChannelAffineCache,
}

fn swish_map(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(swish_scalar)
}

impl MbConvBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        init: &mut Initializer,
    ) -> Self {
        let expanded = in_channels * expand_ratio;
        let squeeze = (in_channels / SE_REDUCTION).max(1);
        MbConvBlock {
            expand: (expand_ratio > 1).then(|| {
                (
                    PointwiseConv::new(in_channels, expanded, false, init),
                    ChannelAffine::new(expanded, init),
                )
            }),
            dw: DepthwiseConv::new(expanded, kernel, stride, init),
            dw_norm: ChannelAffine::new(expanded, init),
            se_reduce: Linear::new(expanded, squeeze, true, init),
            se_expand: Linear::new(squeeze, expanded, true, init),
            project: PointwiseConv::new(expanded, out_channels, false, init),
            proj_norm: ChannelAffine::new(out_channels, init),
            skip: stride == 1 && in_channels == out_channels,
        }
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, MbCache) {
        let (expanded_act, expand_cache) = match &self.expand {
            Some((pw, norm)) => {
                let (e, pw_c) = pw.forward_cached(x);
                let (en, n_c) = norm.forward_cached(&e);
                (swish_map(&en), Some((pw_c, n_c, en)))
            }
            None => (x.clone(), None),
        };
        let (d, dw_cache) = self.dw.forward_cached(&expanded_act);
        let (dn, dw_norm_cache) = self.dw_norm.forward_cached(&d);
        let da = swish_map(&dn);

        // Squeeze-excitation: global average -> reduce -> gate per channel.
        let c = da.shape()[0];
        let hw = (da.shape()[1] * da.shape()[2]) as f64;
        let pooled = Array2::from_shape_fn((1, c), |(_, ch)| {
            da.index_axis(Axis(0), ch).sum() / hw
        });
        let (r_pre, reduce_cache) = self.se_reduce.forward_cached(&pooled);
        let r = r_pre.mapv(swish_scalar);
        let (g_pre, expand_se_cache) = self.se_expand.forward_cached(&r);
        let gate = g_pre.row(0).mapv(crate::nn::act::sigmoid_scalar);
        let mut gated = da.clone();
        for (ch, mut plane) in gated.axis_iter_mut(Axis(0)).enumerate() {
            let s = gate[ch];
            plane.mapv_inplace(|v| v * s);
        }

        let (pr, project_cache) = self.project.forward_cached(&gated);
        let (prn, proj_norm_cache) = self.proj_norm.forward_cached(&pr);
        let y = if self.skip { &prn + x } else { prn };
        let out_shape = (y.shape()[0], y.shape()[1], y.shape()[2]);
        (
            y,
            MbCache {
                out_shape,
                expand: expand_cache,
                dw_cache,
                dw_norm_cache,
                dw_pre: dn,
                se: SeCache {
                    gated_input: da,
                    reduce_cache,
                    reduce_pre: r_pre,
                    expand_cache: expand_se_cache,
                    gate,
                },
                project_cache,
                proj_norm_cache,
            },
        )
    }

    pub fn backward(&mut self, cache: &MbCache, dy: &Array3<f64>) -> Array3<f64> {
        let d_prn = dy;
        let d_pr = self.proj_norm.backward(&cache.proj_norm_cache, d_prn);
        let d_gated = self.project.backward(&cache.project_cache, &d_pr);

        // Gate backward: direct path plus the pooled gate path.
        let da = &cache.se.gated_input;
        let c = da.shape()[0];
        let hw = (da.shape()[1] * da.shape()[2]) as f64;
        let mut d_da = d_gated.clone();
        let mut d_gate = Array1::zeros(c);
        for ch in 0..c {
            let g = cache.se.gate[ch];
            let dg = d_gated.index_axis(Axis(0), ch);
            let xa = da.index_axis(Axis(0), ch);
            d_gate[ch] = (&dg * &xa).sum();
            d_da.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * g);
        }
        let d_g_pre = Array2::from_shape_fn((1, c), |(_, ch)| {
            let s = cache.se.gate[ch];
            d_gate[ch] * s * (1.0 - s)
        });
        let d_r = self.se_expand.backward(&cache.se.expand_cache, &d_g_pre);
        let d_r_pre = &d_r * &cache.se.reduce_pre.mapv(swish_grad_scalar);
        let d_pooled = self.se_reduce.backward(&cache.se.reduce_cache, &d_r_pre);
        for ch in 0..c {
            let contribution = d_pooled[[0, ch]] / hw;
            d_da.index_axis_mut(Axis(0), ch)
                .mapv_inplace(|v| v + contribution);
        }

        let d_dn = &d_da * &cache.dw_pre.mapv(swish_grad_scalar);
        let d_d = self.dw_norm.backward(&cache.dw_norm_cache, &d_dn);
        let d_expanded_act = self.dw.backward(&cache.dw_cache, &d_d);

        let mut dx = match (&mut self.expand, &cache.expand) {
            (Some((pw, norm)), Some((pw_c, n_c, en))) => {
                let d_en = &d_expanded_act * &en.mapv(swish_grad_scalar);
                let d_e = norm.backward(n_c, &d_en);
                pw.backward(pw_c, &d_e)
            }
            (None, None) => d_expanded_act,
            _ => unreachable!("cache shape matches block shape"),
        };
        if self.skip {
            dx += dy;
        }
        dx
    }
}

impl Params for MbConvBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        if let Some((pw, norm)) = &mut self.expand {
            pw.visit_params(&crate::nn::scope(prefix, "expand"), f);
            norm.visit_params(&crate::nn::scope(prefix, "expand_norm"), f);
        }
        self.dw.visit_params(&crate::nn::scope(prefix, "dw"), f);
        self.dw_norm
            .visit_params(&crate::nn::scope(prefix, "dw_norm"), f);
        self.se_reduce
            .visit_params(&crate::nn::scope(prefix, "se_reduce"), f);
        self.se_expand
            .visit_params(&crate::nn::scope(prefix, "se_expand"), f);
        self.project
            .visit_params(&crate::nn::scope(prefix, "project"), f);
        self.proj_norm
            .visit_params(&crate::nn::scope(prefix, "project_norm"), f);
    }
}

/// Stem plus flattened block list with stride-tap bookkeeping.
pub struct Backbone {
    stem: Conv2d,
    stem_norm: ChannelAffine,
    blocks: Vec<MbConvBlock>,
    /// (block index, stride) pairs marking the tapped feature maps.
    taps: Vec<(usize, u32)>,
}

pub struct BackboneCache {
    stem_cache: Conv2dCache,
    stem_norm_cache: ChannelAffineCache,
    stem_pre: Array3<f64>,
    blocks: Vec<MbCache>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, init: &mut Initializer) -> Result<Self> {
        let stem = Conv2d::new(3, cfg.stem_channels, 3, 2, false, init);
        let stem_norm = ChannelAffine::new(cfg.stem_channels, init);
        let mut blocks = Vec::new();
        let mut taps = Vec::new();
        let tap_stages = cfg.tap_indices()?;
        let mut channels = cfg.stem_channels;
        let mut stride = 2u32;
        for (stage_idx, stage) in cfg.stages.iter().enumerate() {
            stride *= stage.stride as u32;
            for rep in 0..stage.repeats {
                let s = if rep == 0 { stage.stride } else { 1 };
                blocks.push(MbConvBlock::new(
                    channels,
                    stage.channels,
                    stage.expand_ratio,
                    stage.kernel,
                    s,
                    init,
                ));
                channels = stage.channels;
            }
            if tap_stages.contains(&stage_idx) {
                taps.push((blocks.len() - 1, stride));
            }
        }
        Ok(Backbone {
            stem,
            stem_norm,
            blocks,
            taps,
        })
    }

    /// Strides tapped by this trunk, finest first.
    pub fn tap_strides(&self) -> Vec<u32> {
        self.taps.iter().map(|&(_, s)| s).collect()
    }

    pub fn forward_cached(&self, image: &Array3<f64>) -> (BTreeMap<u32, Array3<f64>>, BackboneCache) {
        let (s, stem_cache) = self.stem.forward_cached(image);
        let (sn, stem_norm_cache) = self.stem_norm.forward_cached(&s);
        let mut h = swish_map(&sn);
        let mut taps = BTreeMap::new();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward_cached(&h);
            block_caches.push(cache);
            h = y;
            if let Some(&(_, stride)) = self.taps.iter().find(|&&(idx, _)| idx == i) {
                taps.insert(stride, h.clone());
            }
        }
        (
            taps,
            BackboneCache {
                stem_cache,
                stem_norm_cache,
                stem_pre: sn,
                blocks: block_caches,
            },
        )
    }

    pub fn forward(&self, image: &Array3<f64>) -> BTreeMap<u32, Array3<f64>> {
        self.forward_cached(image).0
    }

    /// Backward from gradients of the tapped maps to the image gradient.
    pub fn backward(
        &mut self,
        cache: &BackboneCache,
        tap_grads: &BTreeMap<u32, Array3<f64>>,
    ) -> Array3<f64> {
        let mut grad: Option<Array3<f64>> = None;
        for i in (0..self.blocks.len()).rev() {
            if let Some(&(_, stride)) = self.taps.iter().find(|&&(idx, _)| idx == i) {
                if let Some(tg) = tap_grads.get(&stride) {
                    grad = Some(match grad {
                        Some(g) => g + tg,
                        None => tg.clone(),
                    });
                }
            }
            let g = grad
                .take()
                .unwrap_or_else(|| Array3::zeros(cache.blocks[i].out_shape));
            grad = Some(self.blocks[i].backward(&cache.blocks[i], &g));
        }
        let g = grad.expect("at least one block");
        let d_sn = &g * &cache.stem_pre.mapv(swish_grad_scalar);
        let d_s = self.stem_norm.backward(&cache.stem_norm_cache, &d_sn);
        self.stem.backward(&cache.stem_cache, &d_s)
    }
}

impl Params for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        self.stem.visit_params(&crate::nn::scope(prefix, "stem"), f);
        self.stem_norm
            .visit_params(&crate::nn::scope(prefix, "stem_norm"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&crate::nn::scope(prefix, &format!("block{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DetectorConfig;
    use crate::nn::gradcheck::{check_gradients, Selection};
    use crate::nn::init::Init;

    fn toy_backbone() -> (Backbone, Array3<f64>) {
        let cfg = DetectorConfig::toy();
        let mut init = Initializer::new(Init::Seeded(5));
        let backbone = Backbone::new(&cfg.backbone, &mut init).unwrap();
        let image = init.weight3((3, 32, 32)).mapv(|v| v * 10.0 + 0.2);
        (backbone, image)
    }

    #[test]
    fn taps_cover_strides_4_to_32_with_expected_sizes() {
        let (backbone, image) = toy_backbone();
        assert_eq!(backbone.tap_strides(), vec![4, 8, 16, 32]);
        let taps = backbone.forward(&image);
        for (&stride, map) in &taps {
            assert_eq!(map.shape()[1], 32usize.div_ceil(stride as usize));
            assert_eq!(map.shape()[2], 32usize.div_ceil(stride as usize));
        }
    }

    #[test]
    fn zero_model_maps_zero_image_to_zero_features() {
        let cfg = DetectorConfig::toy();
        let mut init = Initializer::new(Init::Zeros);
        let backbone = Backbone::new(&cfg.backbone, &mut init).unwrap();
        let taps = backbone.forward(&Array3::zeros((3, 32, 32)));
        for map in taps.values() {
            assert!(map.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic_for_a_seed() {
        let cfg = DetectorConfig::toy();
        let image = {
            let mut init = Initializer::new(Init::Seeded(1));
            init.weight3((3, 32, 32))
        };
        let run = || {
            let mut init = Initializer::new(Init::Seeded(33));
            let backbone = Backbone::new(&cfg.backbone, &mut init).unwrap();
            backbone.forward(&image)
        };
        let a = run();
        let b = run();
        for (x, y) in a.values().zip(b.values()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn single_block_gradients_match_finite_differences() {
        let mut init = Initializer::new(Init::Seeded(11));
        let mut block = MbConvBlock::new(4, 4, 2, 3, 1, &mut init);
        let x = init.weight3((4, 6, 6)).mapv(|v| v * 15.0);
        let report = check_gradients(
            &mut block,
            |m| m.forward_cached(&x).0.iter().map(|v| v * v).sum(),
            |m| {
                let (y, cache) = m.forward_cached(&x);
                m.backward(&cache, &y.mapv(|v| 2.0 * v));
            },
            Selection::PerTensor {
                per_tensor: 6,
                seed: 2,
            },
        );
        assert!(report.max_rel_err < 1e-4, "{}", report.worst);
    }

    #[test]
    fn full_toy_backbone_gradients_match_finite_differences() {
        let cfg = DetectorConfig::toy();
        let mut init = Initializer::new(Init::Seeded(21));
        let mut backbone = Backbone::new(&cfg.backbone, &mut init).unwrap();
        let image = init.weight3((3, 16, 16)).mapv(|v| v * 12.0 + 0.1);
        let loss = |m: &Backbone| -> f64 {
            let taps = m.forward(&image);
            taps.values().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum()
        };
        let report = check_gradients(
            &mut backbone,
            |m| loss(m),
            |m| {
                let (taps, cache) = m.forward_cached(&image);
                let grads: BTreeMap<u32, Array3<f64>> = taps
                    .iter()
                    .map(|(&s, t)| (s, t.mapv(|v| 2.0 * v)))
                    .collect();
                m.backward(&cache, &grads);
            },
            Selection::PerTensor {
                per_tensor: 3,
                seed: 4,
            },
        );
        assert!(report.max_rel_err < 1e-4, "{}", report.worst);
    }
}
