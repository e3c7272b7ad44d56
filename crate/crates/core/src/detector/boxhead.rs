//! Per-region head: two linear layers over the flattened RoI window, then
//! class logits and (optionally) attribute logits.
//!
//! The second linear output doubles as the region feature handed to the
//! fusion model, taken pre-activation so its distribution is unbounded, while
//! a rectifier sits between the two linears.

use ndarray::Array2;

use crate::config::BoxHeadConfig;
use crate::nn::act::relu_grad_scalar;
use crate::nn::{Initializer, Linear, ParamTensor, Params};
use crate::nn::linear::LinearCache;

pub struct BoxHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    attr: Option<Linear>,
}

pub struct BoxHeadOutput {
    /// `(N, feature_dim)` region features (the fc2 output, pre-activation).
    pub features: Array2<f64>,
    /// `(N, num_classes + 1)` logits; column 0 is background.
    pub class_logits: Array2<f64>,
    /// `(N, num_attributes + 1)` logits when the attribute branch exists.
    pub attr_logits: Option<Array2<f64>>,
}

pub struct BoxHeadCache {
    fc1_cache: LinearCache,
    /// fc1 output, pre-rectifier.
    h_pre: Array2<f64>,
    fc2_cache: LinearCache,
    cls_cache: LinearCache,
    attr_cache: Option<LinearCache>,
}

impl BoxHead {
    pub fn new(flat_dim: usize, cfg: &BoxHeadConfig, init: &mut Initializer) -> Self {
        BoxHead {
            fc1: Linear::new(flat_dim, cfg.hidden_dim, true, init),
            fc2: Linear::new(cfg.hidden_dim, cfg.feature_dim, true, init),
            cls: Linear::new(cfg.feature_dim, cfg.num_classes + 1, true, init),
            attr: (cfg.num_attributes > 0)
                .then(|| Linear::new(cfg.feature_dim, cfg.num_attributes + 1, true, init)),
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn num_class_logits(&self) -> usize {
        self.cls.out_dim()
    }

    pub fn forward(&self, rois: &Array2<f64>) -> BoxHeadOutput {
        self.forward_cached(rois).0
    }

    pub fn forward_cached(&self, rois: &Array2<f64>) -> (BoxHeadOutput, BoxHeadCache) {
        let (h_pre, fc1_cache) = self.fc1.forward_cached(rois);
        let h = h_pre.mapv(|v| v.max(0.0));
        let (features, fc2_cache) = self.fc2.forward_cached(&h);
        let (class_logits, cls_cache) = self.cls.forward_cached(&features);
        let (attr_logits, attr_cache) = match &self.attr {
            Some(a) => {
                let (l, c) = a.forward_cached(&features);
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        (
            BoxHeadOutput { features, class_logits, attr_logits },
            BoxHeadCache { fc1_cache, h_pre, fc2_cache, cls_cache, attr_cache },
        )
    }

    /// Backward from gradients of any subset of the three outputs to the
    /// flattened-RoI gradient.
    pub fn backward(
        &mut self,
        cache: &BoxHeadCache,
        d_features: Option<&Array2<f64>>,
        d_class_logits: Option<&Array2<f64>>,
        d_attr_logits: Option<&Array2<f64>>,
    ) -> Array2<f64> {
        let rows = cache.h_pre.shape()[0];
        let mut d_feat = Array2::zeros((rows, self.fc2.out_dim()));
        if let Some(d) = d_features {
            d_feat_accum(&mut d_feat, d);
        }
        if let Some(d) = d_class_logits {
            let g = self.cls.backward(&cache.cls_cache, d);
            d_feat_accum(&mut d_feat, &g);
        }
        if let (Some(d), Some(attr), Some(c)) =
            (d_attr_logits, self.attr.as_mut(), cache.attr_cache.as_ref())
        {
            let g = attr.backward(c, d);
            d_feat_accum(&mut d_feat, &g);
        }
        let mut d_h = self.fc2.backward(&cache.fc2_cache, &d_feat);
        d_h.zip_mut_with(&cache.h_pre, |g, &pre| *g *= relu_grad_scalar(pre));
        self.fc1.backward(&cache.fc1_cache, &d_h)
    }
}

fn d_feat_accum(acc: &mut Array2<f64>, g: &Array2<f64>) {
    acc.zip_mut_with(g, |a, &b| *a += b);
}

impl Params for BoxHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        self.fc1.visit_params(&crate::nn::scope(prefix, "fc1"), f);
        self.fc2.visit_params(&crate::nn::scope(prefix, "fc2"), f);
        self.cls.visit_params(&crate::nn::scope(prefix, "cls"), f);
        if let Some(a) = &mut self.attr {
            a.visit_params(&crate::nn::scope(prefix, "attr"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, finite_diff_vec, Selection};
    use crate::nn::init::Init;
    use crate::nn::{muls_recorded, param_count, reset_mul_counter};

    fn toy_cfg() -> BoxHeadConfig {
        BoxHeadConfig {
            linear_layers: 2,
            hidden_dim: 7,
            feature_dim: 5,
            num_classes: 4,
            num_attributes: 3,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = toy_cfg();
        let mut init = Initializer::new(Init::Zeros);
        let mut head = BoxHead::new(12, &cfg, &mut init);
        let expect = 12 * 7 + 7 + 7 * 5 + 5 + 5 * 5 + 5 + 5 * 4 + 4;
        assert_eq!(param_count(&mut head) as usize, expect);
    }

    #[test]
    fn attribute_branch_is_optional() {
        let cfg = BoxHeadConfig { num_attributes: 0, ..toy_cfg() };
        let mut init = Initializer::new(Init::Seeded(1));
        let head = BoxHead::new(12, &cfg, &mut init);
        let out = head.forward(&Array2::zeros((3, 12)));
        assert!(out.attr_logits.is_none());
        assert_eq!(out.class_logits.shape(), [3, 5]);
    }

    #[test]
    fn recorded_multiplies_match_four_matmuls() {
        let cfg = toy_cfg();
        let mut init = Initializer::new(Init::Seeded(2));
        let head = BoxHead::new(12, &cfg, &mut init);
        let n = 6;
        reset_mul_counter();
        head.forward(&Array2::zeros((n, 12)));
        let expect = n * (12 * 7 + 7 * 5 + 5 * 5 + 5 * 4);
        assert_eq!(muls_recorded(), expect as u64);
    }

    #[test]
    fn zero_input_yields_bias_logits() {
        let cfg = toy_cfg();
        let mut init = Initializer::new(Init::Seeded(3));
        let mut head = BoxHead::new(12, &cfg, &mut init);
        // Give the class branch a recognizable bias.
        head.visit_params("", &mut |t| {
            if t.name == "cls.bias" {
                for (i, v) in t.value.iter_mut().enumerate() {
                    *v = i as f64;
                }
            }
        });
        let out = head.forward(&Array2::zeros((2, 12)));
        // Zero input -> zero h (seeded biases are zero) -> zero features ->
        // logits equal the class bias.
        for r in 0..2 {
            for c in 0..5 {
                assert!((out.class_logits[[r, c]] - c as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_gradients_match_finite_differences() {
        let cfg = toy_cfg();
        let mut init = Initializer::new(Init::Seeded(4));
        let mut head = BoxHead::new(6, &cfg, &mut init);
        // Scale inputs so no rectifier input sits within the perturbation
        // epsilon of the kink, where finite differences are meaningless.
        let x = init.weight2((3, 6)).mapv(|v| v * 50.0);
        // Loss touches all three outputs.
        let loss = |m: &mut BoxHead| {
            let out = m.forward(&x);
            out.features.iter().map(|v| v * v).sum::<f64>()
                + out.class_logits.iter().map(|v| v * v).sum::<f64>()
                + out.attr_logits.unwrap().iter().map(|v| v * v).sum::<f64>()
        };
        let report = check_gradients(
            &mut head,
            loss,
            |m| {
                let (out, cache) = m.forward_cached(&x);
                let df = out.features.mapv(|v| 2.0 * v);
                let dc = out.class_logits.mapv(|v| 2.0 * v);
                let da = out.attr_logits.as_ref().unwrap().mapv(|v| 2.0 * v);
                m.backward(&cache, Some(&df), Some(&dc), Some(&da));
            },
            Selection::All,
        );
        assert!(report.max_rel_err < 1e-4, "{}", report.worst);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = toy_cfg();
        let mut init = Initializer::new(Init::Seeded(5));
        let mut head = BoxHead::new(4, &cfg, &mut init);
        let x0 = init.weight2((2, 4));
        let (out, cache) = head.forward_cached(&x0);
        let dc = out.class_logits.mapv(|v| 2.0 * v);
        let dx = head.backward(&cache, None, Some(&dc), None);

        let flat: Vec<f64> = x0.iter().copied().collect();
        let fd = finite_diff_vec(&flat, |v| {
            let x = Array2::from_shape_vec((2, 4), v.to_vec()).unwrap();
            head.forward(&x).class_logits.iter().map(|z| z * z).sum()
        });
        for (got, want) in dx.iter().zip(fd.iter()) {
            let denom = want.abs().max(got.abs()).max(1e-3);
            assert!(((got - want) / denom).abs() < 1e-4);
        }
    }
}
