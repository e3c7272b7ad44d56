//! Random token masking for masked-language-model pretraining.
//!
//! Masking operates on the text portion of an assembled sequence: region
//! positions are never candidates (they are not tokens), special and
//! reserved ids are exempt, and tag tokens are eligible by default but can
//! be excluded. The default replacement is the pure `[MASK]` substitution;
//! the classic 80/10/10 split (mask / random token / keep) is available as
//! a config switch. All randomness comes from the injected generator, so a
//! seed fully determines the outcome.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::fusion::input::SEGMENT_TAG;
use crate::fusion::tokenizer::MASK_ID;

use crate::fusion::tokenizer::FIRST_WORD_ID;

/// Default masking probability per eligible position.
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// What replaces a position selected for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskStyle {
    /// Every selected position becomes `[MASK]`.
    #[default]
    Pure,
    /// 80% `[MASK]`, 10% a random ordinary token, 10% left unchanged.
    Split801010,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskingConfig {
    /// Per-position masking probability, in `[0, 1]`.
    pub rate: f64,
    pub style: MaskStyle,
    /// Whether tag-segment tokens are eligible (sentence tokens always are).
    pub mask_tags: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { rate: DEFAULT_MASK_RATE, style: MaskStyle::Pure, mask_tags: true }
    }
}

/// Dense-label marker for unmasked positions.
pub const IGNORE_LABEL: u32 = u32::MAX;

/// A masked text sequence plus its prediction targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    /// Token ids after substitution, same length as the input.
    pub token_ids: Vec<u32>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original token ids at `positions`, aligned.
    pub labels: Vec<u32>,
}

impl MaskedBatch {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Labels spread over the full sequence, [`IGNORE_LABEL`] where no
    /// prediction is asked.
    pub fn dense_labels(&self) -> Vec<u32> {
        let mut dense = vec![IGNORE_LABEL; self.token_ids.len()];
        for (&p, &l) in self.positions.iter().zip(self.labels.iter()) {
            dense[p] = l;
        }
        dense
    }
}

/// Mask eligible positions of a text sequence.
///
/// `token_ids`/`segment_ids` are the text portion of a [`FusionInput`]
/// (regions are not part of it by construction). An empty eligible set is
/// valid and yields zero targets.
///
/// [`FusionInput`]: crate::fusion::FusionInput
pub fn mask_tokens(
    token_ids: &[u32],
    segment_ids: &[u8],
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<MaskedBatch> {
    if token_ids.len() != segment_ids.len() {
        return Err(Error::InvalidArgument(
            "token and segment id lengths differ".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(Error::InvalidArgument(format!(
            "mask rate {} outside [0, 1]",
            cfg.rate
        )));
    }
    let ordinary = FIRST_WORD_ID as usize;
    if cfg.style == MaskStyle::Split801010 && vocab_size <= ordinary {
        return Err(Error::InvalidArgument(format!(
            "vocabulary of {vocab_size} has no ordinary tokens to draw random replacements from"
        )));
    }

    let mut out = token_ids.to_vec();
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (i, (&id, &seg)) in token_ids.iter().zip(segment_ids.iter()).enumerate() {
        let special = id < FIRST_WORD_ID;
        let tag_blocked = !cfg.mask_tags && seg == SEGMENT_TAG;
        if special || tag_blocked {
            continue;
        }
        if rng.random::<f64>() >= cfg.rate {
            continue;
        }
        positions.push(i);
        labels.push(id);
        out[i] = match cfg.style {
            MaskStyle::Pure => MASK_ID,
            MaskStyle::Split801010 => {
                let u = rng.random::<f64>();
                if u < 0.8 {
                    MASK_ID
                } else if u < 0.9 {
                    rng.random_range(FIRST_WORD_ID..vocab_size as u32)
                } else {
                    id
                }
            }
        };
    }
    Ok(MaskedBatch { token_ids: out, positions, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::input::{SEGMENT_SENTENCE, SEGMENT_TAG};
    use crate::fusion::tokenizer::{CLS_ID, SEP_ID};
    use rand::SeedableRng;

    fn toy_sequence() -> (Vec<u32>, Vec<u8>) {
        // [CLS] w w w [SEP] t t [SEP]
        let ids = vec![CLS_ID, 110, 111, 112, SEP_ID, 120, 121, SEP_ID];
        let segs = vec![
            SEGMENT_SENTENCE,
            SEGMENT_SENTENCE,
            SEGMENT_SENTENCE,
            SEGMENT_SENTENCE,
            SEGMENT_SENTENCE,
            SEGMENT_TAG,
            SEGMENT_TAG,
            SEGMENT_TAG,
        ];
        (ids, segs)
    }

    #[test]
    fn rate_zero_changes_nothing() {
        let (ids, segs) = toy_sequence();
        let cfg = MaskingConfig { rate: 0.0, ..Default::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let out = mask_tokens(&ids, &segs, &cfg, 200, &mut rng).unwrap();
        assert_eq!(out.token_ids, ids);
        assert!(out.is_empty());
        assert!(out.dense_labels().iter().all(|&l| l == IGNORE_LABEL));
    }

    #[test]
    fn rate_one_masks_every_eligible_position() {
        let (ids, segs) = toy_sequence();
        let cfg = MaskingConfig { rate: 1.0, ..Default::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let out = mask_tokens(&ids, &segs, &cfg, 200, &mut rng).unwrap();
        assert_eq!(out.positions, vec![1, 2, 3, 5, 6]);
        assert_eq!(out.labels, vec![110, 111, 112, 120, 121]);
        for &p in &out.positions {
            assert_eq!(out.token_ids[p], MASK_ID);
        }
        // Specials survive at their positions.
        assert_eq!(out.token_ids[0], CLS_ID);
        assert_eq!(out.token_ids[4], SEP_ID);
        assert_eq!(out.token_ids[7], SEP_ID);
    }

    #[test]
    fn tag_masking_can_be_disabled() {
        let (ids, segs) = toy_sequence();
        let cfg = MaskingConfig { rate: 1.0, mask_tags: false, ..Default::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let out = mask_tokens(&ids, &segs, &cfg, 200, &mut rng).unwrap();
        assert_eq!(out.positions, vec![1, 2, 3]);
        assert_eq!(out.token_ids[5], 120);
        assert_eq!(out.token_ids[6], 121);
    }

    #[test]
    fn dense_labels_sit_exactly_at_masked_positions() {
        let (ids, segs) = toy_sequence();
        let cfg = MaskingConfig { rate: 0.5, ..Default::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let out = mask_tokens(&ids, &segs, &cfg, 200, &mut rng).unwrap();
        let dense = out.dense_labels();
        for (i, &l) in dense.iter().enumerate() {
            assert_eq!(l != IGNORE_LABEL, out.positions.contains(&i));
        }
    }

    #[test]
    fn same_seed_reproduces_and_different_seed_varies() {
        let ids = vec![150u32; 64];
        let segs = vec![SEGMENT_SENTENCE; 64];
        let cfg = MaskingConfig::default();
        let a = mask_tokens(&ids, &segs, &cfg, 200, &mut ChaCha20Rng::seed_from_u64(7)).unwrap();
        let b = mask_tokens(&ids, &segs, &cfg, 200, &mut ChaCha20Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let c = mask_tokens(&ids, &segs, &cfg, 200, &mut ChaCha20Rng::seed_from_u64(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mask_fraction_respects_the_binomial_bound() {
        // 1e5 eligible positions at rate 0.15: the observed count must land
        // within the 99.9% interval (±3.29 sigma), sigma = sqrt(n p (1-p)).
        let n = 100_000usize;
        let ids = vec![150u32; n];
        let segs = vec![SEGMENT_SENTENCE; n];
        let cfg = MaskingConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let out = mask_tokens(&ids, &segs, &cfg, 200, &mut rng).unwrap();
        let expected = n as f64 * cfg.rate;
        let sigma = (n as f64 * cfg.rate * (1.0 - cfg.rate)).sqrt();
        let got = out.positions.len() as f64;
        assert!(
            (got - expected).abs() < 3.29 * sigma,
            "masked {got}, expected {expected} ± {:.1}",
            3.29 * sigma
        );
    }

    #[test]
    fn split_style_hits_its_three_branches_in_proportion() {
        let n = 100_000usize;
        let ids = vec![150u32; n];
        let segs = vec![SEGMENT_SENTENCE; n];
        let cfg =
            MaskingConfig { rate: 1.0, style: MaskStyle::Split801010, mask_tags: true };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let out = mask_tokens(&ids, &segs, &cfg, 400, &mut rng).unwrap();
        assert_eq!(out.positions.len(), n);
        let masked = out.token_ids.iter().filter(|&&t| t == MASK_ID).count() as f64;
        let kept = out.token_ids.iter().filter(|&&t| t == 150).count() as f64;
        let random = n as f64 - masked - kept;
        // Random replacements may also draw the original id, so `kept` runs
        // slightly above 0.1·n and `random` slightly below; the bounds
        // account for that drift plus 3.29-sigma noise.
        assert!((masked - 0.8 * n as f64).abs() < 3.29 * (n as f64 * 0.16).sqrt());
        let draw_back = 0.1 / (400.0 - f64::from(FIRST_WORD_ID));
        let kept_expit = (0.1 + draw_back) * n as f64;
        assert!((kept - kept_expit).abs() < 3.29 * (n as f64 * 0.09).sqrt() + 50.0);
        assert!(random > 0.0);
        // Replacements never land on special/reserved ids.
        for &t in &out.token_ids {
            assert!(t == MASK_ID || t >= FIRST_WORD_ID, "token {t}");
        }
    }

    #[test]
    fn invalid_rates_and_lengths_are_rejected() {
        let (ids, segs) = toy_sequence();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let bad = MaskingConfig { rate: 1.5, ..Default::default() };
        assert!(mask_tokens(&ids, &segs, &bad, 200, &mut rng).is_err());
        let cfg = MaskingConfig::default();
        assert!(mask_tokens(&ids, &segs[..3], &cfg, 200, &mut rng).is_err());
    }
}
