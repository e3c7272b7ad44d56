//! Convolution layers over `(C, H, W)` feature maps, plus the parameter-free
//! resampling ops (2x2 max pooling, nearest-neighbor upsampling) used by the
//! feature pyramid.
//!
//! All convolutions use "same" padding for odd kernels: `pad = (k - 1) / 2`
//! on every side, so the output spatial size is `ceil(in / stride)` for any
//! stride — the same rule the cost model uses. Padded positions participate
//! as explicit multiplications by zero, which keeps the instrumented multiply
//! count identical to the closed-form `k^2 * C_in * C_out * H_out * W_out`.

use ndarray::{Array1, Array2, Array3, Array4};

use super::init::Initializer;
use super::{record_muls, ParamTensor, Params};

fn out_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Standard dense convolution, weight shape `(C_out, C_in, k, k)`.
pub struct Conv2d {
    w: Array4<f64>,
    b: Option<Array1<f64>>,
    gw: Array4<f64>,
    gb: Option<Array1<f64>>,
    stride: usize,
}

pub struct Conv2dCache {
    x: Array3<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding requires an odd kernel");
        assert!(stride >= 1);
        Conv2d {
            w: init.weight4((out_channels, in_channels, kernel, kernel)),
            b: bias.then(|| init.bias(out_channels)),
            gw: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            gb: bias.then(|| Array1::zeros(out_channels)),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(cin, self.in_channels(), "conv input channels mismatch");
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let (oh, ow) = (out_len(h, self.stride), out_len(w, self.stride));
        let cout = self.out_channels();
        record_muls((cout * oh * ow * cin * k * k) as u64);
        let mut y = Array3::zeros((cout, oh, ow));
        for oc in 0..cout {
            let base = self.b.as_ref().map_or(0.0, |b| b[oc]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base;
                    for ic in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - pad as isize;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - pad as isize;
                                // Zero padding as an explicit multiply-by-zero.
                                let xv = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                {
                                    x[[ic, iy as usize, ix as usize]]
                                } else {
                                    0.0
                                };
                                acc += self.w[[oc, ic, ky, kx]] * xv;
                            }
                        }
                    }
                    y[[oc, oy, ox]] = acc;
                }
            }
        }
        y
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        (self.forward(x), Conv2dCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Array3<f64>) -> Array3<f64> {
        let x = &cache.x;
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let (cout, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        assert_eq!(cout, self.out_channels());
        let mut dx = Array3::zeros((cin, h, w));
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dy[[oc, oy, ox]];
                    if let Some(gb) = &mut self.gb {
                        gb[oc] += d;
                    }
                    for ic in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                self.gw[[oc, ic, ky, kx]] += d * x[[ic, iy as usize, ix as usize]];
                                dx[[ic, iy as usize, ix as usize]] += d * self.w[[oc, ic, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Params for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        f(ParamTensor::new(
            super::scope(prefix, "weight"),
            &mut self.w,
            &mut self.gw,
        ));
        if let (Some(b), Some(gb)) = (&mut self.b, &mut self.gb) {
            f(ParamTensor::new(super::scope(prefix, "bias"), b, gb));
        }
    }
}

/// Depthwise convolution: one `(k, k)` kernel per channel.
pub struct DepthwiseConv {
    w: Array3<f64>,
    gw: Array3<f64>,
    stride: usize,
}

pub struct DepthwiseCache {
    x: Array3<f64>,
}

impl DepthwiseConv {
    pub fn new(channels: usize, kernel: usize, stride: usize, init: &mut Initializer) -> Self {
        assert!(kernel % 2 == 1, "same padding requires an odd kernel");
        DepthwiseConv {
            w: init.weight3((channels, kernel, kernel)),
            gw: Array3::zeros((channels, kernel, kernel)),
            stride,
        }
    }

    pub fn channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c, self.channels(), "depthwise channels mismatch");
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let (oh, ow) = (out_len(h, self.stride), out_len(w, self.stride));
        record_muls((c * oh * ow * k * k) as u64);
        let mut y = Array3::zeros((c, oh, ow));
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad as isize;
                            let xv =
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    x[[ch, iy as usize, ix as usize]]
                                } else {
                                    0.0
                                };
                            acc += self.w[[ch, ky, kx]] * xv;
                        }
                    }
                    y[[ch, oy, ox]] = acc;
                }
            }
        }
        y
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, DepthwiseCache) {
        (self.forward(x), DepthwiseCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &DepthwiseCache, dy: &Array3<f64>) -> Array3<f64> {
        let x = &cache.x;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
        let mut dx = Array3::zeros((c, h, w));
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dy[[ch, oy, ox]];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            self.gw[[ch, ky, kx]] += d * x[[ch, iy as usize, ix as usize]];
                            dx[[ch, iy as usize, ix as usize]] += d * self.w[[ch, ky, kx]];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Params for DepthwiseConv {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        f(ParamTensor::new(
            super::scope(prefix, "weight"),
            &mut self.w,
            &mut self.gw,
        ));
    }
}

/// 1x1 convolution, weight shape `(C_out, C_in)`; stride 1 only.
pub struct PointwiseConv {
    w: Array2<f64>,
    b: Option<Array1<f64>>,
    gw: Array2<f64>,
    gb: Option<Array1<f64>>,
}

pub struct PointwiseCache {
    x: Array3<f64>,
}

impl PointwiseConv {
    pub fn new(in_channels: usize, out_channels: usize, bias: bool, init: &mut Initializer) -> Self {
        PointwiseConv {
            w: init.weight2((out_channels, in_channels)),
            b: bias.then(|| init.bias(out_channels)),
            gw: Array2::zeros((out_channels, in_channels)),
            gb: bias.then(|| Array1::zeros(out_channels)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_channels(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(cin, self.in_channels(), "pointwise channels mismatch");
        record_muls((self.out_channels() * cin * h * w) as u64);
        let xf = x.to_shape((cin, h * w)).expect("contiguous map");
        let mut yf = self.w.dot(&xf);
        if let Some(b) = &self.b {
            for (oc, mut row) in yf.rows_mut().into_iter().enumerate() {
                row += b[oc];
            }
        }
        yf.into_shape_with_order((self.out_channels(), h, w))
            .expect("reshape")
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, PointwiseCache) {
        (self.forward(x), PointwiseCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &PointwiseCache, dy: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = (
            cache.x.shape()[0],
            cache.x.shape()[1],
            cache.x.shape()[2],
        );
        let cout = self.out_channels();
        let xf = cache.x.to_shape((cin, h * w)).expect("contiguous map");
        let dyf = dy.to_shape((cout, h * w)).expect("contiguous grad");
        self.gw += &dyf.dot(&xf.t());
        if let Some(gb) = &mut self.gb {
            *gb += &dyf.sum_axis(ndarray::Axis(1));
        }
        self.w
            .t()
            .dot(&dyf)
            .into_shape_with_order((cin, h, w))
            .expect("reshape")
    }
}

impl Params for PointwiseConv {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        f(ParamTensor::new(
            super::scope(prefix, "weight"),
            &mut self.w,
            &mut self.gw,
        ));
        if let (Some(b), Some(gb)) = (&mut self.b, &mut self.gb) {
            f(ParamTensor::new(super::scope(prefix, "bias"), b, gb));
        }
    }
}

/// 2x2 max pooling with stride 2; border windows are clipped, so the output
/// size is `ceil(n / 2)` and matches the stride arithmetic used everywhere
/// else.
pub struct MaxPoolCache {
    in_shape: (usize, usize, usize),
    argmax: Vec<(usize, usize)>,
}

pub fn max_pool2(x: &Array3<f64>) -> (Array3<f64>, MaxPoolCache) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_len(h, 2), out_len(w, 2));
    let mut y = Array3::zeros((c, oh, ow));
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_pos = (0, 0);
                for dy in 0..2 {
                    for dxp in 0..2 {
                        let (iy, ix) = (oy * 2 + dy, ox * 2 + dxp);
                        if iy < h && ix < w && x[[ch, iy, ix]] > best {
                            best = x[[ch, iy, ix]];
                            best_pos = (iy, ix);
                        }
                    }
                }
                y[[ch, oy, ox]] = best;
                argmax.push(best_pos);
            }
        }
    }
    (
        y,
        MaxPoolCache {
            in_shape: (c, h, w),
            argmax,
        },
    )
}

pub fn max_pool2_backward(cache: &MaxPoolCache, dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = cache.in_shape;
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let mut dx = Array3::zeros((c, h, w));
    let mut i = 0;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy, ix) = cache.argmax[i];
                dx[[ch, iy, ix]] += dy[[ch, oy, ox]];
                i += 1;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling to an explicit target size; the source must
/// satisfy `src = ceil(target / 2)` per axis.
pub fn upsample_nearest2(x: &Array3<f64>, target: (usize, usize)) -> Array3<f64> {
    let (c, sh, sw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (th, tw) = target;
    assert_eq!(sh, out_len(th, 2), "upsample source height mismatch");
    assert_eq!(sw, out_len(tw, 2), "upsample source width mismatch");
    Array3::from_shape_fn((c, th, tw), |(ch, i, j)| x[[ch, i / 2, j / 2]])
}

pub fn upsample_nearest2_backward(dy: &Array3<f64>, src: (usize, usize)) -> Array3<f64> {
    let (c, th, tw) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let mut dx = Array3::zeros((c, src.0, src.1));
    for ch in 0..c {
        for i in 0..th {
            for j in 0..tw {
                dx[[ch, i / 2, j / 2]] += dy[[ch, i, j]];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, finite_diff_vec, Selection};
    use crate::nn::init::{Init, Initializer};
    use crate::nn::{muls_recorded, param_count, reset_mul_counter};

    fn seeded_map(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut init = Initializer::new(Init::Seeded(seed));
        init.weight3(shape).mapv(|v| v * 20.0)
    }

    #[test]
    fn output_sizes_follow_ceil_rule() {
        let mut init = Initializer::new(Init::Seeded(0));
        let conv = Conv2d::new(2, 3, 3, 2, false, &mut init);
        let y = conv.forward(&Array3::zeros((2, 7, 10)));
        assert_eq!(y.shape(), &[3, 4, 5]);
        let dw = DepthwiseConv::new(2, 5, 2, &mut init);
        assert_eq!(dw.forward(&Array3::zeros((2, 9, 4))).shape(), &[2, 5, 2]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut init = Initializer::new(Init::Zeros);
        let mut conv = Conv2d::new(1, 1, 3, 1, false, &mut init);
        conv.w[[0, 0, 1, 1]] = 1.0;
        let x = seeded_map((1, 5, 5), 1);
        assert_eq!(conv.forward(&x), x);
    }

    #[test]
    fn multiply_counts_match_closed_form_including_padding() {
        let mut init = Initializer::new(Init::Seeded(2));
        let conv = Conv2d::new(3, 4, 3, 2, true, &mut init);
        let x = seeded_map((3, 7, 5), 3);
        reset_mul_counter();
        conv.forward(&x);
        assert_eq!(muls_recorded(), 4 * 4 * 3 * 3 * 3 * 3);

        let dw = DepthwiseConv::new(3, 3, 1, &mut init);
        reset_mul_counter();
        dw.forward(&x);
        assert_eq!(muls_recorded(), 3 * 7 * 5 * 3 * 3);

        let pw = PointwiseConv::new(3, 8, true, &mut init);
        reset_mul_counter();
        pw.forward(&x);
        assert_eq!(muls_recorded(), 8 * 3 * 7 * 5);
    }

    #[test]
    fn param_counts() {
        let mut init = Initializer::new(Init::Zeros);
        let mut conv = Conv2d::new(3, 4, 3, 1, true, &mut init);
        assert_eq!(param_count(&mut conv), 4 * 3 * 3 * 3 + 4);
        let mut dw = DepthwiseConv::new(5, 3, 1, &mut init);
        assert_eq!(param_count(&mut dw), 5 * 9);
        let mut pw = PointwiseConv::new(5, 7, false, &mut init);
        assert_eq!(param_count(&mut pw), 35);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut init = Initializer::new(Init::Seeded(5));
        let mut conv = Conv2d::new(2, 3, 3, 2, true, &mut init);
        let x = seeded_map((2, 5, 4), 6);
        let report = check_gradients(
            &mut conv,
            |m| m.forward(&x).iter().map(|v| v * v).sum(),
            |m| {
                let (y, cache) = m.forward_cached(&x);
                m.backward(&cache, &y.mapv(|v| 2.0 * v));
            },
            Selection::All,
        );
        assert!(report.max_rel_err < 1e-4, "{}", report.worst);
    }

    #[test]
    fn depthwise_and_pointwise_gradients_match_finite_differences() {
        let mut init = Initializer::new(Init::Seeded(7));
        let mut dw = DepthwiseConv::new(3, 3, 2, &mut init);
        let x = seeded_map((3, 5, 5), 8);
        let report = check_gradients(
            &mut dw,
            |m| m.forward(&x).iter().map(|v| v * v).sum(),
            |m| {
                let (y, cache) = m.forward_cached(&x);
                m.backward(&cache, &y.mapv(|v| 2.0 * v));
            },
            Selection::All,
        );
        assert!(report.max_rel_err < 1e-4, "{}", report.worst);

        let mut pw = PointwiseConv::new(3, 4, true, &mut init);
        let report = check_gradients(
            &mut pw,
            |m| m.forward(&x).iter().map(|v| v * v).sum(),
            |m| {
                let (y, cache) = m.forward_cached(&x);
                m.backward(&cache, &y.mapv(|v| 2.0 * v));
            },
            Selection::All,
        );
        assert!(report.max_rel_err < 1e-4, "{}", report.worst);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut init = Initializer::new(Init::Seeded(9));
        let mut conv = Conv2d::new(2, 2, 3, 1, false, &mut init);
        let x = seeded_map((2, 4, 4), 10);
        let (y, cache) = conv.forward_cached(&x);
        let dx = conv.backward(&cache, &y.mapv(|v| 2.0 * v));
        let flat: Vec<f64> = x.iter().copied().collect();
        let fd = finite_diff_vec(&flat, |v| {
            let xv = Array3::from_shape_vec((2, 4, 4), v.to_vec()).unwrap();
            conv.forward(&xv).iter().map(|o| o * o).sum()
        });
        for (a, b) in dx.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn max_pool_takes_maxima_and_routes_gradient() {
        let x = Array3::from_shape_vec(
            (1, 2, 4),
            vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0],
        )
        .unwrap();
        let (y, cache) = max_pool2(&x);
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1]], 7.0);
        let dy = Array3::from_shape_vec((1, 1, 2), vec![1.0, 2.0]).unwrap();
        let dx = max_pool2_backward(&cache, &dy);
        assert_eq!(dx[[0, 0, 1]], 1.0);
        assert_eq!(dx[[0, 1, 2]], 2.0);
        assert_eq!(dx.sum(), 3.0);
    }

    #[test]
    fn max_pool_clips_border_windows() {
        let x = Array3::from_shape_fn((1, 5, 3), |(_, i, j)| (i * 3 + j) as f64);
        let (y, _) = max_pool2(&x);
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert_eq!(y[[0, 2, 1]], 14.0); // single-cell corner window
    }

    #[test]
    fn upsample_round_trips_shapes_and_gradient_sums() {
        let x = seeded_map((2, 3, 6), 11);
        let y = upsample_nearest2(&x, (5, 11));
        assert_eq!(y.shape(), &[2, 5, 11]);
        assert_eq!(y[[0, 4, 10]], x[[0, 2, 5]]);
        let dy = Array3::ones((2, 5, 11));
        let dx = upsample_nearest2_backward(&dy, (3, 6));
        assert_eq!(dx.sum(), 2.0 * 5.0 * 11.0);
        // Each source cell receives one gradient unit per target cell mapped to it.
        assert_eq!(dx[[0, 0, 0]], 4.0);
        assert_eq!(dx[[0, 2, 5]], 1.0);
    }
}
