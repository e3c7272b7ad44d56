//! Two-image reasoning: does a description hold for a pair of images?
//!
//! The description is fused with each image independently; the two pooled
//! [CLS] vectors are concatenated and scored by a binary linear classifier
//! over the doubled width.

use ndarray::Array1;

use crate::detector::regions::RegionSet;
use crate::error::{Error, Result};
use crate::fusion::input::{assemble_input, Task};
use crate::fusion::FusionTransformer;
use crate::nn::act::softmax_slice;
use crate::nn::{Init, Initializer, Linear, ParamTensor, Params};

/// Binary classifier over the concatenated pooled pair.
#[derive(Debug)]
pub struct Nlvr2Head {
    linear: Linear,
}

impl Nlvr2Head {
    pub fn new(hidden: usize, init: Init) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("zero-width reasoning head".into()));
        }
        let mut ini = Initializer::new(init);
        Ok(Self { linear: Linear::new(2 * hidden, 2, true, &mut ini) })
    }

    pub fn logits(&self, joint: &Array1<f64>) -> Array1<f64> {
        self.linear.forward1(joint)
    }

    pub fn linear_mut(&mut self) -> &mut Linear {
        &mut self.linear
    }

    /// Copy the first-image half of the weight onto the second-image half,
    /// making the classifier invariant to image order when the two pooled
    /// vectors are swapped.
    pub fn symmetrize(&mut self) {
        let d = self.linear.in_dim() / 2;
        let w = self.linear.weight_mut();
        for r in 0..w.nrows() {
            for c in 0..d {
                w[[r, d + c]] = w[[r, c]];
            }
        }
    }
}

impl Params for Nlvr2Head {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        self.linear.visit_params(&crate::nn::scope(prefix, "nlvr2_head"), f);
    }
}

/// Verdict on a (description, image pair) instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nlvr2Prediction {
    /// True when the description is judged to hold for the pair.
    pub label: bool,
    /// Probability of the predicted class.
    pub confidence: f64,
    /// Probability that the description holds.
    pub p_true: f64,
}

/// One image's evidence: its regions and tag tokens.
pub type ImageSide<'a> = (&'a RegionSet, &'a [u32]);

/// Judge whether `description_ids` holds for the image pair.
pub fn nlvr2_predict(
    model: &FusionTransformer,
    head: &Nlvr2Head,
    description_ids: &[u32],
    left: ImageSide<'_>,
    right: ImageSide<'_>,
) -> Result<Nlvr2Prediction> {
    let d = model.config().hidden;
    if head.linear.in_dim() != 2 * d {
        return Err(Error::InvalidConfig(format!(
            "reasoning head expects {}-d input, the pooled pair is {}-d",
            head.linear.in_dim(),
            2 * d
        )));
    }
    let mut joint = Array1::zeros(2 * d);
    for (slot, (regions, tags)) in [left, right].into_iter().enumerate() {
        let input = assemble_input(description_ids, tags, regions, Task::Nlvr2, model.config())?;
        let pooled = model.forward(&input)?.pooled;
        joint.slice_mut(ndarray::s![slot * d..(slot + 1) * d]).assign(&pooled);
    }
    let logits = head.logits(&joint);
    let mut probs = [logits[0], logits[1]];
    softmax_slice(&mut probs);
    let p_true = probs[1];
    let label = p_true > 0.5;
    let confidence = if label { p_true } else { 1.0 - p_true };
    Ok(Nlvr2Prediction { label, confidence, p_true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TransformerConfig;
    use crate::detector::regions::Region;

    fn toy_regions(k: usize, dim: usize, shift: f32) -> RegionSet {
        let regions = (0..k)
            .map(|i| Region {
                bbox: [1.0 + shift, 2.0 + i as f32, 25.0 + shift, 30.0],
                score: 0.9,
                class_id: 1,
                tag: format!("x{i}"),
                feature: (0..dim).map(|j| 0.07 * (j as f32 + shift) - 0.2).collect(),
            })
            .collect();
        RegionSet {
            image_id: format!("img{shift}"),
            image_width: 64,
            image_height: 48,
            feature_dim: dim as u32,
            regions,
        }
    }

    #[test]
    fn zero_classifier_sits_on_the_fence() {
        let cfg = TransformerConfig::toy(200);
        let (dim, hidden) = (cfg.region_feature_dim, cfg.hidden);
        let model = FusionTransformer::new(cfg, Init::Seeded(40)).unwrap();
        let head = Nlvr2Head::new(hidden, Init::Zeros).unwrap();
        let left = toy_regions(2, dim, 0.0);
        let right = toy_regions(2, dim, 3.0);
        let pred =
            nlvr2_predict(&model, &head, &[110, 111], (&left, &[120]), (&right, &[121])).unwrap();
        assert!((pred.confidence - 0.5).abs() < 1e-12);
        assert!((pred.p_true - 0.5).abs() < 1e-12);
        assert!(!pred.label, "exact fence rounds to false");
    }

    #[test]
    fn symmetric_weights_make_the_verdict_order_invariant() {
        let cfg = TransformerConfig::toy(200);
        let (dim, hidden) = (cfg.region_feature_dim, cfg.hidden);
        let model = FusionTransformer::new(cfg, Init::Seeded(41)).unwrap();
        let mut head = Nlvr2Head::new(hidden, Init::Seeded(42)).unwrap();
        head.symmetrize();
        let left = toy_regions(3, dim, 0.0);
        let right = toy_regions(2, dim, 5.0);
        let desc = [112u32, 113];
        let ab =
            nlvr2_predict(&model, &head, &desc, (&left, &[122]), (&right, &[123])).unwrap();
        let ba =
            nlvr2_predict(&model, &head, &desc, (&right, &[123]), (&left, &[122])).unwrap();
        assert!((ab.p_true - ba.p_true).abs() < 1e-12);
        assert_eq!(ab.label, ba.label);

        // Sanity: without symmetrization the order does matter here.
        let plain = Nlvr2Head::new(hidden, Init::Seeded(42)).unwrap();
        let ab2 = nlvr2_predict(&model, &plain, &desc, (&left, &[122]), (&right, &[123])).unwrap();
        let ba2 = nlvr2_predict(&model, &plain, &desc, (&right, &[123]), (&left, &[122])).unwrap();
        assert!((ab2.p_true - ba2.p_true).abs() > 1e-9);
    }

    #[test]
    fn prediction_matches_manual_composition() {
        let cfg = TransformerConfig::toy(200);
        let (dim, hidden) = (cfg.region_feature_dim, cfg.hidden);
        let model = FusionTransformer::new(cfg, Init::Seeded(43)).unwrap();
        let head = Nlvr2Head::new(hidden, Init::Seeded(44)).unwrap();
        let left = toy_regions(2, dim, 1.0);
        let right = toy_regions(1, dim, 2.0);
        let desc = [114u32];
        let pred =
            nlvr2_predict(&model, &head, &desc, (&left, &[124]), (&right, &[125])).unwrap();

        // By hand: two forwards, concatenate, linear, softmax.
        let pool = |regions: &RegionSet, tags: &[u32]| {
            let input =
                assemble_input(&desc, tags, regions, Task::Nlvr2, model.config()).unwrap();
            model.forward(&input).unwrap().pooled
        };
        let (pl, pr) = (pool(&left, &[124]), pool(&right, &[125]));
        let joint: Array1<f64> = pl.iter().chain(pr.iter()).copied().collect();
        let logits = head.logits(&joint);
        let p_true = 1.0 / (1.0 + (logits[0] - logits[1]).exp());
        assert!((pred.p_true - p_true).abs() < 1e-12);
        assert_eq!(pred.label, p_true > 0.5);
    }

    #[test]
    fn empty_region_sets_are_accepted_on_either_side() {
        let cfg = TransformerConfig::toy(200);
        let (dim, hidden) = (cfg.region_feature_dim, cfg.hidden);
        let model = FusionTransformer::new(cfg, Init::Seeded(45)).unwrap();
        let head = Nlvr2Head::new(hidden, Init::Seeded(46)).unwrap();
        let empty = toy_regions(0, dim, 0.0);
        let full = toy_regions(2, dim, 1.0);
        let pred =
            nlvr2_predict(&model, &head, &[110], (&empty, &[]), (&full, &[126])).unwrap();
        assert!((0.0..=1.0).contains(&pred.p_true));
    }

    #[test]
    fn invalid_region_sets_are_rejected() {
        let cfg = TransformerConfig::toy(200);
        let (dim, hidden) = (cfg.region_feature_dim, cfg.hidden);
        let model = FusionTransformer::new(cfg, Init::Zeros).unwrap();
        let head = Nlvr2Head::new(hidden, Init::Zeros).unwrap();
        let good = toy_regions(1, dim, 0.0);
        let mut bad = toy_regions(1, dim, 0.0);
        bad.regions[0].bbox = [10.0, 10.0, 5.0, 5.0]; // degenerate box
        assert!(nlvr2_predict(&model, &head, &[110], (&good, &[]), (&bad, &[])).is_err());
    }
}
