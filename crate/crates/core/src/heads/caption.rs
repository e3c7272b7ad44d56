//! Greedy caption generation.
//!
//! Decoding is recursive mask-prediction: a [MASK] token is appended after
//! the tokens generated so far, the model predicts it under the causal
//! caption mask, the prediction replaces the mask, and the loop repeats
//! until the end token ([SEP]) or the length budget. Beam size is fixed at
//! 1 (greedy), which is the operating point this model targets.

use crate::detector::regions::RegionSet;
use crate::error::{Error, Result};
use crate::fusion::input::{assemble_input, Task};
use crate::fusion::tokenizer::{MASK_ID, SEP_ID};
use crate::fusion::FusionTransformer;
use crate::nn::act::log_sum_exp;

use super::argmax_tie_lowest;

/// Decoding hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct CaptionConfig {
    /// Maximum number of generated tokens (end token excluded).
    pub max_len: usize,
    /// Beam size; only greedy (1) is supported.
    pub beam: usize,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self { max_len: 20, beam: 1 }
    }
}

/// Result of a decoding run.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionState {
    /// Generated token ids, end token excluded.
    pub tokens: Vec<u32>,
    /// Log-probability of each decoding step's choice, including the
    /// terminating end-token step when one occurred.
    pub log_probs: Vec<f64>,
    /// True once the end token was emitted or the budget was reached.
    pub finished: bool,
    pub max_len: usize,
}

impl CaptionState {
    /// Check the structural invariants: length within budget, and
    /// `finished` exactly when the end token fired or the budget ran out.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "{} generated tokens exceed the budget {}",
                self.tokens.len(),
                self.max_len
            )));
        }
        let ended_early = self.log_probs.len() == self.tokens.len() + 1;
        if self.finished != (ended_early || self.tokens.len() == self.max_len) {
            return Err(Error::InvalidArgument(
                "finished flag inconsistent with end token / budget".into(),
            ));
        }
        Ok(())
    }
}

/// Generate a caption for the detected regions and their tags.
pub fn caption_generate(
    model: &FusionTransformer,
    regions: &RegionSet,
    tag_ids: &[u32],
    cfg: &CaptionConfig,
) -> Result<CaptionState> {
    if cfg.beam != 1 {
        return Err(Error::InvalidConfig(format!(
            "beam size {} unsupported: this model targets greedy decoding (beam 1)",
            cfg.beam
        )));
    }
    let mut state = CaptionState {
        tokens: Vec::new(),
        log_probs: Vec::new(),
        finished: cfg.max_len == 0,
        max_len: cfg.max_len,
    };
    while !state.finished {
        let mut sentence = state.tokens.clone();
        sentence.push(MASK_ID);
        let input = assemble_input(&sentence, tag_ids, regions, Task::Caption, model.config())?;
        if input.truncation.sentence_dropped > 0 {
            return Err(Error::InvalidArgument(format!(
                "caption of {} tokens plus {} tags and {} regions exceeds the \
                 {}-position budget",
                sentence.len(),
                input.tag_len,
                input.region_count(),
                model.config().max_positions
            )));
        }
        let out = model.forward(&input)?;
        // The mask sits after [CLS] and the generated prefix.
        let mask_pos = 1 + state.tokens.len();
        let logits = model.mlm_logits(&out.hidden, &[mask_pos])?;
        let row = logits.row(0);
        let row_slice = row.as_slice().expect("contiguous logits");
        let chosen = argmax_tie_lowest(row.iter().copied());
        state.log_probs.push(row[chosen] - log_sum_exp(row_slice));
        if chosen as u32 == SEP_ID {
            state.finished = true;
        } else {
            state.tokens.push(chosen as u32);
            if state.tokens.len() == cfg.max_len {
                state.finished = true;
            }
        }
    }
    state.validate()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TransformerConfig;
    use crate::detector::regions::Region;
    use crate::nn::{Init, Params};

    fn toy_cfg() -> TransformerConfig {
        TransformerConfig::toy(200)
    }

    fn toy_regions(k: usize, dim: usize) -> RegionSet {
        let regions = (0..k)
            .map(|i| Region {
                bbox: [1.0 + i as f32, 2.0, 20.0 + i as f32, 24.0],
                score: 0.9 - 0.1 * i as f32,
                class_id: 1,
                tag: format!("tag{i}"),
                feature: (0..dim).map(|j| 0.1 * (i + j) as f32 - 0.3).collect(),
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

    fn rig_end_token(model: &mut FusionTransformer, favored: u32) {
        model.visit_params("", &mut |p| {
            if p.name == "mlm_head.decoder.bias" {
                p.value[favored as usize] = 5.0;
            }
        });
    }

    #[test]
    fn a_model_that_always_predicts_the_end_token_stops_immediately() {
        let cfg = toy_cfg();
        let dim = cfg.region_feature_dim;
        let mut model = FusionTransformer::new(cfg, Init::Zeros).unwrap();
        rig_end_token(&mut model, SEP_ID);
        let regions = toy_regions(2, dim);
        let state =
            caption_generate(&model, &regions, &[120, 121], &CaptionConfig::default()).unwrap();
        assert!(state.tokens.is_empty());
        assert!(state.finished);
        assert_eq!(state.log_probs.len(), 1, "one decode step: the end token");
    }

    #[test]
    fn budget_of_one_yields_at_most_one_token() {
        let cfg = toy_cfg();
        let dim = cfg.region_feature_dim;
        let mut model = FusionTransformer::new(cfg, Init::Zeros).unwrap();
        rig_end_token(&mut model, 130); // an ordinary word wins every step
        let regions = toy_regions(2, dim);
        let cfg = CaptionConfig { max_len: 1, ..Default::default() };
        let state = caption_generate(&model, &regions, &[120], &cfg).unwrap();
        assert_eq!(state.tokens, vec![130]);
        assert!(state.finished, "budget reached");
        assert_eq!(state.log_probs.len(), 1);
    }

    #[test]
    fn greedy_decoding_equals_a_manual_unroll() {
        let cfg = toy_cfg();
        let dim = cfg.region_feature_dim;
        let model = FusionTransformer::new(cfg, Init::Seeded(21)).unwrap();
        let regions = toy_regions(3, dim);
        let tags = [120u32, 121];
        let decode_cfg = CaptionConfig { max_len: 5, ..Default::default() };
        let state = caption_generate(&model, &regions, &tags, &decode_cfg).unwrap();

        // Manual unroll: the same recursion written out step by step.
        let mut tokens: Vec<u32> = Vec::new();
        let mut log_probs = Vec::new();
        for _ in 0..decode_cfg.max_len {
            let mut sentence = tokens.clone();
            sentence.push(MASK_ID);
            let input =
                assemble_input(&sentence, &tags, &regions, Task::Caption, model.config()).unwrap();
            let out = model.forward(&input).unwrap();
            let logits = model.mlm_logits(&out.hidden, &[1 + tokens.len()]).unwrap();
            let row = logits.row(0);
            let best = argmax_tie_lowest(row.iter().copied());
            log_probs.push(row[best] - log_sum_exp(row.as_slice().unwrap()));
            if best as u32 == SEP_ID {
                break;
            }
            tokens.push(best as u32);
        }
        assert_eq!(state.tokens, tokens);
        assert_eq!(state.log_probs.len(), log_probs.len());
        for (a, b) in state.log_probs.iter().zip(log_probs.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        state.validate().unwrap();
    }

    #[test]
    fn prefix_decisions_are_stable_as_the_caption_grows() {
        // The causal mask means appending new tokens cannot change the
        // logits (and thus the choice) at earlier steps.
        let cfg = toy_cfg();
        let dim = cfg.region_feature_dim;
        let model = FusionTransformer::new(cfg, Init::Seeded(22)).unwrap();
        let regions = toy_regions(2, dim);
        let tags = [122u32];
        let short = caption_generate(&model, &regions, &tags, &CaptionConfig { max_len: 2, beam: 1 })
            .unwrap();
        let long = caption_generate(&model, &regions, &tags, &CaptionConfig { max_len: 6, beam: 1 })
            .unwrap();
        assert_eq!(short.tokens[..], long.tokens[..short.tokens.len()]);
        for (a, b) in short.log_probs.iter().zip(long.log_probs.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_region_sets_are_accepted() {
        let cfg = toy_cfg();
        let dim = cfg.region_feature_dim;
        let model = FusionTransformer::new(cfg, Init::Seeded(23)).unwrap();
        let regions = toy_regions(0, dim);
        let state =
            caption_generate(&model, &regions, &[], &CaptionConfig { max_len: 3, beam: 1 })
                .unwrap();
        state.validate().unwrap();
        assert!(state.tokens.len() <= 3);
    }

    #[test]
    fn non_greedy_beams_are_rejected() {
        let cfg = toy_cfg();
        let dim = cfg.region_feature_dim;
        let model = FusionTransformer::new(cfg, Init::Zeros).unwrap();
        let regions = toy_regions(1, dim);
        let err =
            caption_generate(&model, &regions, &[], &CaptionConfig { max_len: 3, beam: 2 })
                .unwrap_err();
        assert!(err.to_string().contains("beam"));
    }
}
