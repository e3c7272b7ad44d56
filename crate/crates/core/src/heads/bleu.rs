//! Plain n-gram overlap score for smoke tests.
//!
//! NOT an official metric implementation: no canonical tokenization, no
//! smoothing (any zero n-gram precision zeroes the score), and n-gram
//! orders above the candidate length are skipped rather than smoothed.
//! Use it to sanity-check decoding, not to report paper-grade numbers.

use std::collections::HashMap;
use std::hash::Hash;

/// Modified n-gram precision score with brevity penalty, over any token
/// type. `max_n` of 4 gives the conventional 4-gram variant.
pub fn ngram_bleu<T: Eq + Hash + Clone>(candidate: &[T], references: &[&[T]], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let top_n = max_n.min(candidate.len());
    let mut log_precision_sum = 0.0;
    for n in 1..=top_n {
        let cand_counts = ngram_counts(candidate, n);
        let total: usize = cand_counts.values().sum();
        let mut clipped = 0usize;
        for (gram, count) in &cand_counts {
            let best_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += (*count).min(best_ref);
        }
        if clipped == 0 {
            return 0.0;
        }
        log_precision_sum += (clipped as f64 / total as f64).ln();
    }
    let geo_mean = (log_precision_sum / top_n as f64).exp();

    // Brevity penalty against the reference length closest to the
    // candidate's (ties prefer the shorter reference).
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * geo_mean
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn exact_match_scores_one() {
        let cand = words("a red dog near the tree");
        let score = ngram_bleu(&cand, &[&cand], 4);
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let cand = words("x y z");
        let reference = words("a b c d");
        assert_eq!(ngram_bleu(&cand, &[&reference], 4), 0.0);
    }

    #[test]
    fn short_prefix_matches_the_hand_computed_value() {
        // All available n-gram precisions are 1, so the score is exactly
        // the brevity penalty exp(1 - 6/3).
        let cand = words("the cat sat");
        let reference = words("the cat sat on the mat");
        let score = ngram_bleu(&cand, &[&reference], 4);
        assert!((score - (1.0f64 - 2.0).exp()).abs() < 1e-12, "{score}");
    }

    #[test]
    fn repeated_tokens_are_clipped_by_reference_counts() {
        let cand = words("the the the");
        let reference = words("the cat");
        // Unigram precision 1/3 (one "the" available), candidate longer
        // than needed for BP... c=3 > r=2 so BP = 1.
        let score = ngram_bleu(&cand, &[&reference], 1);
        assert!((score - 1.0 / 3.0).abs() < 1e-12, "{score}");
        // Bigram "the the" never appears → zero at max_n 2.
        assert_eq!(ngram_bleu(&cand, &[&reference], 2), 0.0);
    }

    #[test]
    fn multiple_references_take_the_best_clip_per_ngram() {
        let cand = words("a b");
        let r1 = words("a x");
        let r2 = words("y b");
        // Unigrams both covered across references; bigram "a b" nowhere.
        let score = ngram_bleu(&cand, &[&r1, &r2], 1);
        assert!((score - 1.0).abs() < 1e-12);
        assert_eq!(ngram_bleu(&cand, &[&r1, &r2], 2), 0.0);
    }

    #[test]
    fn degenerate_inputs_score_zero() {
        let empty: Vec<&str> = vec![];
        let reference = words("a b");
        assert_eq!(ngram_bleu(&empty, &[&reference], 4), 0.0);
        let cand = words("a b");
        assert_eq!(ngram_bleu(&cand, &[], 4), 0.0);
        assert_eq!(ngram_bleu(&cand, &[&reference], 0), 0.0);
    }

    #[test]
    fn works_over_token_ids_too() {
        let cand = [5u32, 6, 7];
        let reference = [5u32, 6, 7];
        assert!((ngram_bleu(&cand, &[&reference], 4) - 1.0).abs() < 1e-12);
    }
}
