//! Activation functions and their derivatives.
//!
//! All functions are elementwise and allocation-light; backward variants take
//! the cached forward *input* and the incoming gradient. Elementwise work is
//! deliberately not fed to the multiply counter: the cost model counts only
//! matmul/convolution multiplies.

use ndarray::{ArrayBase, DataMut, Dimension};

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable log(1 + e^x).
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, the convention used by this transformer family.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// x * sigmoid(x), the smooth gating activation used in the detector trunk.
#[inline]
pub fn swish_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

#[inline]
pub fn swish_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s + x * s * (1.0 - s)
}

#[inline]
pub fn sigmoid_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 - s)
}

#[inline]
pub fn relu_scalar(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_grad_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Apply an elementwise function in place.
pub fn map_inplace<S, D>(a: &mut ArrayBase<S, D>, f: impl Fn(f64) -> f64)
where
    S: DataMut<Elem = f64>,
    D: Dimension,
{
    a.mapv_inplace(f);
}

/// Softmax over a slice in place; returns nothing, the slice becomes the
/// probability vector. Uses max subtraction for stability.
pub fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-sum-exp of a slice, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
