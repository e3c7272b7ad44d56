//! Fully connected layer over row vectors.

use ndarray::{Array1, Array2};

use super::init::Initializer;
use super::{record_muls, ParamTensor, Params};

/// `y = x W^T + b` applied row-wise to a `(rows, in_dim)` input.
#[derive(Debug)]
pub struct Linear {
    w: Array2<f64>,
    b: Option<Array1<f64>>,
    gw: Array2<f64>,
    gb: Option<Array1<f64>>,
}

/// Forward cache: the layer input, needed for the weight gradient.
pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, init: &mut Initializer) -> Self {
        Linear {
            w: init.weight2((out_dim, in_dim)),
            b: bias.then(|| init.bias(out_dim)),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: bias.then(|| Array1::zeros(out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w
    }

    pub fn bias_mut(&mut self) -> Option<&mut Array1<f64>> {
        self.b.as_mut()
    }

    /// Forward pass on a `(rows, in_dim)` matrix.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_dim(), "linear input width mismatch");
        record_muls((x.nrows() * self.in_dim() * self.out_dim()) as u64);
        let mut y = x.dot(&self.w.t());
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    /// Forward pass on a single vector.
    pub fn forward1(&self, x: &Array1<f64>) -> Array1<f64> {
        let x2 = x.view().insert_axis(ndarray::Axis(0)).to_owned();
        self.forward(&x2).row(0).to_owned()
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let y = self.forward(x);
        (y, LinearCache { x: x.clone() })
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f64>) -> Array2<f64> {
        assert_eq!(dy.ncols(), self.out_dim(), "linear grad width mismatch");
        assert_eq!(dy.nrows(), cache.x.nrows(), "linear grad rows mismatch");
        self.gw += &dy.t().dot(&cache.x);
        if let Some(gb) = &mut self.gb {
            *gb += &dy.sum_axis(ndarray::Axis(0));
        }
        dy.dot(&self.w)
    }
}

impl Params for Linear {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, Selection};
    use crate::nn::init::Init;
    use crate::nn::{muls_recorded, param_count, reset_mul_counter};
    use ndarray::array;

    #[test]
    fn forward_matches_hand_computation() {
        let mut init = Initializer::new(Init::Zeros);
        let mut lin = Linear::new(2, 2, true, &mut init);
        lin.w = array![[1.0, 2.0], [3.0, 4.0]];
        lin.b = Some(array![0.5, -0.5]);
        let y = lin.forward(&array![[1.0, 1.0], [2.0, 0.0]]);
        assert_eq!(y, array![[3.5, 6.5], [2.5, 5.5]]);
    }

    #[test]
    fn param_count_includes_bias() {
        let mut init = Initializer::new(Init::Zeros);
        let mut with = Linear::new(8, 4, true, &mut init);
        let mut without = Linear::new(8, 4, false, &mut init);
        assert_eq!(param_count(&mut with), 8 * 4 + 4);
        assert_eq!(param_count(&mut without), 8 * 4);
    }

    #[test]
    fn records_one_mul_per_mac() {
        let mut init = Initializer::new(Init::Seeded(1));
        let lin = Linear::new(16, 8, true, &mut init);
        let x = Array2::<f64>::ones((3, 16));
        reset_mul_counter();
        lin.forward(&x);
        assert_eq!(muls_recorded(), 3 * 16 * 8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut init = Initializer::new(Init::Seeded(42));
        let mut lin = Linear::new(5, 3, true, &mut init);
        let x = init.weight2((4, 5));
        let report = check_gradients(
            &mut lin,
            |m| {
                // Scalar loss: sum of squares of the outputs.
                m.forward(&x).iter().map(|v| v * v).sum()
            },
            |m| {
                let (y, cache) = m.forward_cached(&x);
                let dy = y.mapv(|v| 2.0 * v);
                m.backward(&cache, &dy);
            },
            Selection::All,
        );
        assert!(
            report.max_rel_err < 1e-4,
            "worst {}: {}",
            report.worst,
            report.max_rel_err
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut init = Initializer::new(Init::Seeded(9));
        let mut lin = Linear::new(4, 3, true, &mut init);
        let x = init.weight2((2, 4));
        let (y, cache) = lin.forward_cached(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = lin.backward(&cache, &dy);

        let flat: Vec<f64> = x.iter().copied().collect();
        let fd = crate::nn::gradcheck::finite_diff_vec(&flat, |v| {
            let xv = Array2::from_shape_vec((2, 4), v.to_vec()).unwrap();
            lin.forward(&xv).iter().map(|o| o * o).sum()
        });
        for (a, b) in dx.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
