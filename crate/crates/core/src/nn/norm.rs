//! Normalization layers.
//!
//! `ChannelAffine` is a per-channel scale and shift over feature maps; it is
//! batch normalization in inference form (running statistics folded into the
//! affine pair), which is how the detector counts and trains its norms at
//! desk scale. `LayerNorm` is the transformer's per-row normalization with a
//! full backward pass.

use ndarray::{Array1, Array2, Array3, Axis};

use super::init::Initializer;
use super::{ParamTensor, Params};

/// Per-channel `y = scale[c] * x + shift[c]` over a `(C, H, W)` map.
pub struct ChannelAffine {
    scale: Array1<f64>,
    shift: Array1<f64>,
    gscale: Array1<f64>,
    gshift: Array1<f64>,
}

pub struct ChannelAffineCache {
    x: Array3<f64>,
}

impl ChannelAffine {
    pub fn new(channels: usize, init: &mut Initializer) -> Self {
        ChannelAffine {
            scale: init.norm_scale(channels),
            shift: init.bias(channels),
            gscale: Array1::zeros(channels),
            gshift: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        assert_eq!(x.shape()[0], self.channels(), "channel mismatch");
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (s, b) = (self.scale[c], self.shift[c]);
            plane.mapv_inplace(|v| s * v + b);
        }
        y
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, ChannelAffineCache) {
        (self.forward(x), ChannelAffineCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &ChannelAffineCache, dy: &Array3<f64>) -> Array3<f64> {
        assert_eq!(dy.shape(), cache.x.shape());
        let mut dx = dy.clone();
        for (c, mut plane) in dx.axis_iter_mut(Axis(0)).enumerate() {
            let gd = dy.index_axis(Axis(0), c);
            let xp = cache.x.index_axis(Axis(0), c);
            self.gscale[c] += (&gd * &xp).sum();
            self.gshift[c] += gd.sum();
            let s = self.scale[c];
            plane.mapv_inplace(|v| s * v);
        }
        dx
    }
}

impl Params for ChannelAffine {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        f(ParamTensor::new(
            super::scope(prefix, "scale"),
            &mut self.scale,
            &mut self.gscale,
        ));
        f(ParamTensor::new(
            super::scope(prefix, "shift"),
            &mut self.shift,
            &mut self.gshift,
        ));
    }
}

const LN_EPS: f64 = 1e-12;

/// Row-wise layer normalization over the last axis of a `(rows, dim)` input.
pub struct LayerNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    ggamma: Array1<f64>,
    gbeta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize, init: &mut Initializer) -> Self {
        LayerNorm {
            gamma: init.norm_scale(dim),
            beta: init.bias(dim),
            ggamma: Array1::zeros(dim),
            gbeta: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        assert_eq!(x.ncols(), self.dim(), "layernorm width mismatch");
        let n = x.ncols() as f64;
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(x.nrows());
        let mut y = Array2::zeros(x.raw_dim());
        for (r, row) in x.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[[r, c]] = h;
                y[[r, c]] = self.gamma[c] * h + self.beta[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let n = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (r, dyr) in dy.axis_iter(Axis(0)).enumerate() {
            let xh = cache.xhat.index_axis(Axis(0), r);
            // Gradient of the normalized value.
            let dxhat: Vec<f64> = dyr
                .iter()
                .enumerate()
                .map(|(c, &d)| d * self.gamma[c])
                .collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / n;
            let mean_dxhat_xhat = dxhat
                .iter()
                .zip(xh.iter())
                .map(|(d, h)| d * h)
                .sum::<f64>()
                / n;
            let is = cache.inv_std[r];
            for c in 0..dy.ncols() {
                self.ggamma[c] += dyr[c] * xh[c];
                self.gbeta[c] += dyr[c];
                dx[[r, c]] = is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        f(ParamTensor::new(
            super::scope(prefix, "gamma"),
            &mut self.gamma,
            &mut self.ggamma,
        ));
        f(ParamTensor::new(
            super::scope(prefix, "beta"),
            &mut self.beta,
            &mut self.gbeta,
        ));
    }
}
