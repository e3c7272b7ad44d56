//! Visual question answering: a linear layer over the pooled [CLS]
//! representation scoring a shared answer set with independent sigmoids.
//! Training treats each answer as its own binary target (summed binary
//! cross-entropy), which supports the standard soft multi-label targets.

use ndarray::Array1;

use crate::detector::regions::RegionSet;
use crate::error::{Error, Result};
use crate::fusion::input::{assemble_input, Task};
use crate::fusion::FusionTransformer;
use crate::nn::act::{log1p_exp, sigmoid_scalar};
use crate::nn::{Init, Initializer, Linear, ParamTensor, Params};

use super::argmax_tie_lowest;

/// Size of the shared answer vocabulary.
pub const VQA_ANSWER_COUNT: usize = 3129;

/// Linear answer classifier over the pooled representation.
#[derive(Debug)]
pub struct VqaHead {
    linear: Linear,
}

impl VqaHead {
    pub fn new(hidden: usize, answers: usize, init: Init) -> Result<Self> {
        if hidden == 0 || answers == 0 {
            return Err(Error::InvalidConfig(format!(
                "answer head needs positive dimensions, got {hidden} -> {answers}"
            )));
        }
        let mut ini = Initializer::new(init);
        Ok(Self { linear: Linear::new(hidden, answers, true, &mut ini) })
    }

    /// Head over the standard shared answer set.
    pub fn standard(hidden: usize, init: Init) -> Result<Self> {
        Self::new(hidden, VQA_ANSWER_COUNT, init)
    }

    pub fn answers(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn logits(&self, pooled: &Array1<f64>) -> Array1<f64> {
        self.linear.forward1(pooled)
    }

    pub fn linear_mut(&mut self) -> &mut Linear {
        &mut self.linear
    }
}

impl Params for VqaHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        self.linear.visit_params(&crate::nn::scope(prefix, "vqa_head"), f);
    }
}

/// Prediction over the answer set.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaPrediction {
    /// Index of the highest-scoring answer (ties pick the lowest index).
    pub answer: usize,
    /// Sigmoid score of that answer.
    pub confidence: f64,
    /// Sigmoid score per answer.
    pub scores: Vec<f64>,
}

/// Answer a question about an image.
pub fn vqa_predict(
    model: &FusionTransformer,
    head: &VqaHead,
    question_ids: &[u32],
    tag_ids: &[u32],
    regions: &RegionSet,
) -> Result<VqaPrediction> {
    if head.linear.in_dim() != model.config().hidden {
        return Err(Error::InvalidConfig(format!(
            "answer head expects {}-d input, model produces {}-d",
            head.linear.in_dim(),
            model.config().hidden
        )));
    }
    let input = assemble_input(question_ids, tag_ids, regions, Task::Vqa, model.config())?;
    let out = model.forward(&input)?;
    let logits = head.logits(&out.pooled);
    let scores: Vec<f64> = logits.iter().map(|&l| sigmoid_scalar(l)).collect();
    let answer = argmax_tie_lowest(scores.iter().copied());
    Ok(VqaPrediction { answer, confidence: scores[answer], scores })
}

/// Summed binary cross-entropy over the answer set with soft targets in
/// `[0, 1]`, plus its logit gradient `sigmoid(logit) - target`.
pub fn vqa_loss_and_grad(
    logits: &Array1<f64>,
    targets: &Array1<f64>,
) -> Result<(f64, Array1<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logits for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (i, (&l, &t)) in logits.iter().zip(targets.iter()).enumerate() {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "target {t} for answer {i} outside [0, 1]"
            )));
        }
        // -[t ln s + (1-t) ln (1-s)] for s = sigmoid(l), stable form.
        loss += log1p_exp(l) - t * l;
        grad[i] = sigmoid_scalar(l) - t;
    }
    Ok((loss, grad))
}

pub fn vqa_loss(logits: &Array1<f64>, targets: &Array1<f64>) -> Result<f64> {
    vqa_loss_and_grad(logits, targets).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TransformerConfig;
    use crate::detector::regions::Region;
    use crate::nn::gradcheck::finite_diff_vec;
    use ndarray::array;

    fn toy_regions(k: usize, dim: usize) -> RegionSet {
        let regions = (0..k)
            .map(|i| Region {
                bbox: [2.0, 3.0 + i as f32, 30.0, 40.0],
                score: 0.8,
                class_id: 2,
                tag: format!("t{i}"),
                feature: (0..dim).map(|j| (j as f32 - 2.0) * 0.05).collect(),
            })
            .collect();
        RegionSet {
            image_id: "toy".into(),
            image_width: 64,
            image_height: 48,
            feature_dim: dim as u32,
            regions,
        }
    }

    #[test]
    fn the_standard_head_scores_the_shared_answer_set() {
        let head = VqaHead::standard(32, Init::Zeros).unwrap();
        assert_eq!(head.answers(), VQA_ANSWER_COUNT);
        assert_eq!(head.answers(), 3129);
    }

    #[test]
    fn zero_head_scores_everything_half_and_picks_answer_zero() {
        let cfg = TransformerConfig::toy(200);
        let dim = cfg.region_feature_dim;
        let hidden = cfg.hidden;
        let model = FusionTransformer::new(cfg, Init::Seeded(30)).unwrap();
        let head = VqaHead::new(hidden, 7, Init::Zeros).unwrap();
        let regions = toy_regions(2, dim);
        let pred = vqa_predict(&model, &head, &[110, 111], &[120], &regions).unwrap();
        assert_eq!(pred.answer, 0);
        assert!((pred.confidence - 0.5).abs() < 1e-12);
        assert!(pred.scores.iter().all(|s| (s - 0.5).abs() < 1e-12));
        assert_eq!(pred.scores.len(), 7);
    }

    #[test]
    fn three_answer_toy_matches_manual_sigmoid_and_argmax() {
        let cfg = TransformerConfig::toy(200);
        let dim = cfg.region_feature_dim;
        let hidden = cfg.hidden;
        let model = FusionTransformer::new(cfg, Init::Seeded(31)).unwrap();
        let mut head = VqaHead::new(hidden, 3, Init::Seeded(32)).unwrap();
        // Hand-set weights so the expected scores are computed independently.
        for (r, row) in head.linear_mut().weight_mut().rows_mut().into_iter().enumerate() {
            for (c, w) in row.into_iter().enumerate() {
                *w = 0.01 * (r as f64 + 1.0) * ((c % 5) as f64 - 2.0);
            }
        }
        *head.linear_mut().bias_mut().unwrap() = array![0.3, -0.2, 0.1];

        let regions = toy_regions(3, dim);
        let question = [110u32, 111, 112];
        let pred = vqa_predict(&model, &head, &question, &[121], &regions).unwrap();

        let input =
            assemble_input(&question, &[121], &regions, Task::Vqa, model.config()).unwrap();
        let pooled = model.forward(&input).unwrap().pooled;
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for a in 0..3 {
            let mut z = head.linear.weight().row(a).dot(&pooled);
            z += [0.3, -0.2, 0.1][a];
            let s = 1.0 / (1.0 + (-z).exp());
            assert!((pred.scores[a] - s).abs() < 1e-12);
            if s > best_s {
                best_s = s;
                best = a;
            }
        }
        assert_eq!(pred.answer, best);
        assert!((pred.confidence - best_s).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_hand_computation_on_soft_targets() {
        let logits = array![0.2, -0.1, 0.0];
        let targets = array![1.0, 0.0, 0.6];
        let (loss, grad) = vqa_loss_and_grad(&logits, &targets).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = -(s(0.2).ln())
            - (1.0 - s(-0.1)).ln()
            - (0.6 * s(0.0).ln() + 0.4 * (1.0 - s(0.0)).ln());
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        for (i, (&l, &t)) in logits.iter().zip(targets.iter()).enumerate() {
            assert!((grad[i] - (s(l) - t)).abs() < 1e-12);
        }
        // Summed (not averaged): a duplicated answer doubles the loss.
        let (double, _) = vqa_loss_and_grad(
            &array![0.2, 0.2],
            &array![1.0, 1.0],
        )
        .unwrap();
        assert!((double - 2.0 * -(s(0.2).ln())).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let logits = array![0.7, -1.3, 2.1, 0.0];
        let targets = array![0.25, 1.0, 0.0, 0.5];
        let (_, grad) = vqa_loss_and_grad(&logits, &targets).unwrap();
        let fd = finite_diff_vec(logits.as_slice().unwrap(), |v| {
            vqa_loss(&Array1::from(v.to_vec()), &targets).unwrap()
        });
        for (g, f) in grad.iter().zip(fd.iter()) {
            assert!((g - f).abs() < 1e-7);
        }
    }

    #[test]
    fn out_of_range_targets_are_rejected() {
        let logits = array![0.0, 0.0];
        assert!(vqa_loss(&logits, &array![0.5, 1.1]).is_err());
        assert!(vqa_loss(&logits, &array![-0.1, 0.5]).is_err());
        assert!(vqa_loss(&logits, &array![0.5]).is_err());
    }

    #[test]
    fn empty_region_sets_are_accepted() {
        let cfg = TransformerConfig::toy(200);
        let dim = cfg.region_feature_dim;
        let hidden = cfg.hidden;
        let model = FusionTransformer::new(cfg, Init::Seeded(33)).unwrap();
        let head = VqaHead::new(hidden, 4, Init::Seeded(34)).unwrap();
        let regions = toy_regions(0, dim);
        let pred = vqa_predict(&model, &head, &[115], &[], &regions).unwrap();
        assert_eq!(pred.scores.len(), 4);
        assert!(pred.scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn head_and_model_widths_must_agree() {
        let cfg = TransformerConfig::toy(200);
        let dim = cfg.region_feature_dim;
        let model = FusionTransformer::new(cfg, Init::Zeros).unwrap();
        let head = VqaHead::new(16, 4, Init::Zeros).unwrap();
        let regions = toy_regions(1, dim);
        assert!(vqa_predict(&model, &head, &[110], &[], &regions).is_err());
    }
}
