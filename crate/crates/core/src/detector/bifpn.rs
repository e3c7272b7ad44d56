//! Bidirectional feature pyramid with learned, normalized fusion weights.
//!
//! The pyramid takes the four backbone taps (strides 4..32), projects each to
//! the shared channel width, derives the stride-64 level by projecting the
//! stride-32 tap and pooling, and then runs `cells` rounds of fusion. Each
//! round has eight fused nodes: a top-down pass from stride 32 down to 4
//! followed by a bottom-up pass back to 64, the standard bidirectional
//! layout. A node combines its inputs with non-negative normalized weights
//! (`relu(w_i) / (sum relu(w) + eps)`), applies the smooth gating activation,
//! and finishes with a depthwise-separable convolution and a channel affine.
//!
//! Resolution changes between adjacent levels use parameter-free nearest
//! upsampling (coarser to finer) and 2x2 max pooling (finer to coarser).

use std::collections::BTreeMap;

use ndarray::{Array1, Array3};

use super::FPN_STRIDES;
use crate::config::FpnConfig;
use crate::error::{Error, Result};
use crate::nn::act::{swish_grad_scalar, swish_scalar};
use crate::nn::conv::{
    max_pool2, max_pool2_backward, upsample_nearest2, upsample_nearest2_backward, DepthwiseCache,
    MaxPoolCache, PointwiseCache,
};
use crate::nn::norm::ChannelAffineCache;
use crate::nn::{
    record_muls, ChannelAffine, DepthwiseConv, Initializer, ParamTensor, Params, PointwiseConv,
};

/// Fusion-weight normalization epsilon.
pub const FUSION_EPS: f64 = 1e-4;

/// Where a node input comes from: a cell input level or an earlier node of
/// the same cell.
#[derive(Debug, Clone, Copy)]
enum Source {
    Lvl(usize),
    Node(usize),
}

/// The eight fused nodes of one cell: `(output level, inputs)`.
///
/// Nodes 0-3 are the top-down pass (stride 32 -> 4), nodes 4-7 the bottom-up
/// pass (8 -> 64). The input counts per level match the cost model's node
/// table exactly.
const NODE_WIRING: [(usize, &[Source]); 8] = [
    (3, &[Source::Lvl(3), Source::Lvl(4)]),
    (2, &[Source::Lvl(2), Source::Node(0)]),
    (1, &[Source::Lvl(1), Source::Node(1)]),
    (0, &[Source::Lvl(0), Source::Node(2)]),
    (1, &[Source::Lvl(1), Source::Node(2), Source::Node(3)]),
    (2, &[Source::Lvl(2), Source::Node(1), Source::Node(4)]),
    (3, &[Source::Lvl(3), Source::Node(0), Source::Node(5)]),
    (4, &[Source::Lvl(4), Source::Node(6)]),
];

/// Which node provides each output level of a cell.
const OUTPUT_NODES: [usize; 5] = [3, 4, 5, 6, 7];

fn source_level(src: Source) -> usize {
    match src {
        Source::Lvl(l) => l,
        Source::Node(i) => NODE_WIRING[i].0,
    }
}

struct FpnNode {
    level: usize,
    w: Array1<f64>,
    gw: Array1<f64>,
    dw: DepthwiseConv,
    pw: PointwiseConv,
    norm: ChannelAffine,
}

enum ResizeCache {
    Same,
    /// Upsampled from a coarser source with these source dims.
    Up((usize, usize)),
    /// Pooled down from a finer source.
    Down(MaxPoolCache),
}

struct NodeCache {
    /// Inputs after resizing to the node's resolution.
    inputs: Vec<Array3<f64>>,
    resize: Vec<ResizeCache>,
    /// Normalized fusion output, pre-activation.
    fused: Array3<f64>,
    /// relu(w_i) at forward time and their sum plus epsilon.
    relu_w: Vec<f64>,
    denom: f64,
    dw_cache: DepthwiseCache,
    pw_cache: PointwiseCache,
    norm_cache: ChannelAffineCache,
    out_shape: (usize, usize, usize),
}

impl FpnNode {
    fn new(channels: usize, num_inputs: usize, init: &mut Initializer) -> Self {
        FpnNode {
            level: 0, // set by the caller
            w: init.fusion_weights(num_inputs),
            gw: Array1::zeros(num_inputs),
            dw: DepthwiseConv::new(channels, 3, 1, init),
            pw: PointwiseConv::new(channels, channels, false, init),
            norm: ChannelAffine::new(channels, init),
        }
    }

    fn fuse(&self, inputs: &[Array3<f64>]) -> (Array3<f64>, Vec<f64>, f64) {
        let relu_w: Vec<f64> = self.w.iter().map(|&v| v.max(0.0)).collect();
        let denom: f64 = relu_w.iter().sum::<f64>() + FUSION_EPS;
        let shape = inputs[0].raw_dim();
        record_muls((inputs.len() * shape[0] * shape[1] * shape[2]) as u64);
        let mut fused = Array3::zeros(shape);
        for (x, &r) in inputs.iter().zip(relu_w.iter()) {
            fused.zip_mut_with(x, |f, &v| *f += r * v);
        }
        fused.mapv_inplace(|v| v / denom);
        (fused, relu_w, denom)
    }

    fn forward_cached(&self, inputs: Vec<Array3<f64>>, resize: Vec<ResizeCache>) -> (Array3<f64>, NodeCache) {
        let (fused, relu_w, denom) = self.fuse(&inputs);
        let act = fused.mapv(swish_scalar);
        let (d, dw_cache) = self.dw.forward_cached(&act);
        let (p, pw_cache) = self.pw.forward_cached(&d);
        let (y, norm_cache) = self.norm.forward_cached(&p);
        let out_shape = (y.shape()[0], y.shape()[1], y.shape()[2]);
        (
            y,
            NodeCache {
                inputs,
                resize,
                fused,
                relu_w,
                denom,
                dw_cache,
                pw_cache,
                norm_cache,
                out_shape,
            },
        )
    }

    /// Backward to the node's (resized) input gradients.
    fn backward(&mut self, cache: &NodeCache, dy: &Array3<f64>) -> Vec<Array3<f64>> {
        let d_p = self.norm.backward(&cache.norm_cache, dy);
        let d_d = self.pw.backward(&cache.pw_cache, &d_p);
        let d_act = self.dw.backward(&cache.dw_cache, &d_d);
        let d_fused = &d_act * &cache.fused.mapv(swish_grad_scalar);
        let mut input_grads = Vec::with_capacity(cache.inputs.len());
        for (i, x) in cache.inputs.iter().enumerate() {
            // d fused / d w_i = relu'(w_i) * (x_i - fused) / denom
            if self.w[i] > 0.0 {
                let mut acc = 0.0;
                ndarray::Zip::from(&d_fused)
                    .and(x)
                    .and(&cache.fused)
                    .for_each(|&df, &xv, &fv| acc += df * (xv - fv) / cache.denom);
                self.gw[i] += acc;
            }
            let scale = cache.relu_w[i] / cache.denom;
            input_grads.push(d_fused.mapv(|v| v * scale));
        }
        input_grads
    }
}

impl Params for FpnNode {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        f(ParamTensor::new(
            crate::nn::scope(prefix, "fusion"),
            &mut self.w,
            &mut self.gw,
        ));
        self.dw.visit_params(&crate::nn::scope(prefix, "dw"), f);
        self.pw.visit_params(&crate::nn::scope(prefix, "pw"), f);
        self.norm.visit_params(&crate::nn::scope(prefix, "norm"), f);
    }
}

/// The full pyramid: laterals plus repeated fusion cells.
pub struct BiFpn {
    laterals: Vec<(PointwiseConv, ChannelAffine)>,
    cells: Vec<Vec<FpnNode>>,
}

struct CellCache {
    nodes: Vec<NodeCache>,
    in_shapes: [(usize, usize, usize); 5],
}

pub struct BiFpnCache {
    lateral: Vec<(PointwiseCache, ChannelAffineCache)>,
    l4_pool: MaxPoolCache,
    cells: Vec<CellCache>,
}

impl BiFpn {
    pub fn new(cfg: &FpnConfig, tap_channels: &[usize; 4], init: &mut Initializer) -> Self {
        let f = cfg.channels;
        let mut laterals = Vec::with_capacity(5);
        for &c in tap_channels {
            laterals.push((
                PointwiseConv::new(c, f, false, init),
                ChannelAffine::new(f, init),
            ));
        }
        // Extra projection of the stride-32 tap feeding the pooled stride-64
        // level.
        laterals.push((
            PointwiseConv::new(tap_channels[3], f, false, init),
            ChannelAffine::new(f, init),
        ));
        let mut cells = Vec::with_capacity(cfg.cells);
        for _ in 0..cfg.cells {
            let mut nodes = Vec::with_capacity(NODE_WIRING.len());
            for &(level, sources) in NODE_WIRING.iter() {
                let mut node = FpnNode::new(f, sources.len(), init);
                node.level = level;
                nodes.push(node);
            }
            cells.push(nodes);
        }
        BiFpn { laterals, cells }
    }

    pub fn channels(&self) -> usize {
        self.laterals[0].1.channels()
    }

    fn resize_to(
        x: &Array3<f64>,
        from_level: usize,
        to_level: usize,
        target: (usize, usize),
    ) -> (Array3<f64>, ResizeCache) {
        match from_level.cmp(&to_level) {
            std::cmp::Ordering::Equal => (x.clone(), ResizeCache::Same),
            std::cmp::Ordering::Greater => {
                // Coarser source: upsample.
                let src = (x.shape()[1], x.shape()[2]);
                (upsample_nearest2(x, target), ResizeCache::Up(src))
            }
            std::cmp::Ordering::Less => {
                let (y, cache) = max_pool2(x);
                (y, ResizeCache::Down(cache))
            }
        }
    }

    /// Fuse the four backbone taps into the five-level pyramid.
    pub fn forward_cached(
        &self,
        taps: &BTreeMap<u32, Array3<f64>>,
    ) -> Result<(BTreeMap<u32, Array3<f64>>, BiFpnCache)> {
        for stride in &FPN_STRIDES[..4] {
            if !taps.contains_key(stride) {
                return Err(Error::InvalidArgument(format!(
                    "pyramid input is missing stride {stride}"
                )));
            }
        }
        if taps.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "pyramid input must have exactly 4 levels, got {}",
                taps.len()
            )));
        }
        let mut lateral_caches = Vec::with_capacity(5);
        let mut levels: Vec<Array3<f64>> = Vec::with_capacity(5);
        for (i, stride) in FPN_STRIDES[..4].iter().enumerate() {
            let (pw, norm) = &self.laterals[i];
            let (p, pw_c) = pw.forward_cached(&taps[stride]);
            let (y, n_c) = norm.forward_cached(&p);
            lateral_caches.push((pw_c, n_c));
            levels.push(y);
        }
        let (pw, norm) = &self.laterals[4];
        let (p, pw_c) = pw.forward_cached(&taps[&32]);
        let (l4pre, n_c) = norm.forward_cached(&p);
        lateral_caches.push((pw_c, n_c));
        let (l4, l4_pool) = max_pool2(&l4pre);
        levels.push(l4);

        let mut cell_caches = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let in_shapes = std::array::from_fn(|i| {
                let s = levels[i].shape();
                (s[0], s[1], s[2])
            });
            let mut node_outputs: Vec<Array3<f64>> = Vec::with_capacity(8);
            let mut node_caches = Vec::with_capacity(8);
            for (node, &(level, sources)) in cell.iter().zip(NODE_WIRING.iter()) {
                let target = (levels[level].shape()[1], levels[level].shape()[2]);
                let mut inputs = Vec::with_capacity(sources.len());
                let mut resize = Vec::with_capacity(sources.len());
                for &src in sources {
                    let arr = match src {
                        Source::Lvl(l) => &levels[l],
                        Source::Node(i) => &node_outputs[i],
                    };
                    let (resized, rc) = Self::resize_to(arr, source_level(src), level, target);
                    inputs.push(resized);
                    resize.push(rc);
                }
                let (y, cache) = node.forward_cached(inputs, resize);
                node_outputs.push(y);
                node_caches.push(cache);
            }
            levels = OUTPUT_NODES
                .iter()
                .map(|&i| node_outputs[i].clone())
                .collect();
            cell_caches.push(CellCache {
                nodes: node_caches,
                in_shapes,
            });
        }

        let out: BTreeMap<u32, Array3<f64>> = FPN_STRIDES
            .iter()
            .copied()
            .zip(levels.into_iter())
            .collect();
        Ok((
            out,
            BiFpnCache {
                lateral: lateral_caches,
                l4_pool,
                cells: cell_caches,
            },
        ))
    }

    pub fn forward(&self, taps: &BTreeMap<u32, Array3<f64>>) -> Result<BTreeMap<u32, Array3<f64>>> {
        Ok(self.forward_cached(taps)?.0)
    }

    /// Backward from pyramid-output gradients to backbone-tap gradients.
    pub fn backward(
        &mut self,
        cache: &BiFpnCache,
        out_grads: &BTreeMap<u32, Array3<f64>>,
    ) -> BTreeMap<u32, Array3<f64>> {
        let mut level_grads: Vec<Option<Array3<f64>>> = FPN_STRIDES
            .iter()
            .map(|s| out_grads.get(s).cloned())
            .collect();

        for (cell, cc) in self.cells.iter_mut().zip(cache.cells.iter()).rev() {
            let mut node_grads: Vec<Option<Array3<f64>>> = vec![None; 8];
            for (lvl, &node_idx) in OUTPUT_NODES.iter().enumerate() {
                node_grads[node_idx] = level_grads[lvl].take();
            }
            let mut in_grads: Vec<Option<Array3<f64>>> = vec![None; 5];
            for i in (0..8).rev() {
                let g = node_grads[i]
                    .take()
                    .unwrap_or_else(|| Array3::zeros(cc.nodes[i].out_shape));
                let input_grads = cell[i].backward(&cc.nodes[i], &g);
                let (level, sources) = NODE_WIRING[i];
                for ((&src, dg), rc) in sources
                    .iter()
                    .zip(input_grads.into_iter())
                    .zip(cc.nodes[i].resize.iter())
                {
                    let src_level = source_level(src);
                    let resized_back = match rc {
                        ResizeCache::Same => dg,
                        ResizeCache::Up(src_dims) => upsample_nearest2_backward(&dg, *src_dims),
                        ResizeCache::Down(pc) => max_pool2_backward(pc, &dg),
                    };
                    debug_assert!(src_level.abs_diff(level) <= 1);
                    let slot = match src {
                        Source::Lvl(l) => &mut in_grads[l],
                        Source::Node(j) => &mut node_grads[j],
                    };
                    *slot = Some(match slot.take() {
                        Some(acc) => acc + &resized_back,
                        None => resized_back,
                    });
                }
            }
            level_grads = in_grads
                .into_iter()
                .enumerate()
                .map(|(l, g)| Some(g.unwrap_or_else(|| Array3::zeros(cc.in_shapes[l]))))
                .collect();
        }

        // Laterals.
        let mut tap_grads: BTreeMap<u32, Array3<f64>> = BTreeMap::new();
        for (i, stride) in FPN_STRIDES[..4].iter().enumerate() {
            if let Some(g) = level_grads[i].take() {
                let (pw, norm) = &mut self.laterals[i];
                let (pw_c, n_c) = &cache.lateral[i];
                let d_p = norm.backward(n_c, &g);
                tap_grads.insert(*stride, pw.backward(pw_c, &d_p));
            }
        }
        if let Some(g4) = level_grads[4].take() {
            let d_pre = max_pool2_backward(&cache.l4_pool, &g4);
            let (pw, norm) = &mut self.laterals[4];
            let (pw_c, n_c) = &cache.lateral[4];
            let d_p = norm.backward(n_c, &d_pre);
            let d_tap = pw.backward(pw_c, &d_p);
            tap_grads
                .entry(32)
                .and_modify(|t| *t += &d_tap)
                .or_insert(d_tap);
        }
        tap_grads
    }
}

impl Params for BiFpn {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        for (i, (pw, norm)) in self.laterals.iter_mut().enumerate() {
            pw.visit_params(&crate::nn::scope(prefix, &format!("lateral{i}.pw")), f);
            norm.visit_params(&crate::nn::scope(prefix, &format!("lateral{i}.norm")), f);
        }
        for (c, cell) in self.cells.iter_mut().enumerate() {
            for (n, node) in cell.iter_mut().enumerate() {
                node.visit_params(&crate::nn::scope(prefix, &format!("cell{c}.node{n}")), f);
            }
        }
    }
}
