//! Image-text retrieval: the pair-match head scores every (image, text)
//! pair, and ranked recall is computed in both directions from the
//! resulting score matrix. At desk scale all pairs are scored
//! exhaustively; the usual 1K/5K protocol is mirrored structurally at
//! small N.

use ndarray::{Array1, Array2};

use crate::detector::regions::RegionSet;
use crate::error::{Error, Result};
use crate::fusion::input::{assemble_input, Task};
use crate::fusion::FusionTransformer;
use crate::nn::act::sigmoid_scalar;

/// Match probability for one (image, text) pair, in `[0, 1]`.
pub fn retrieval_score(
    model: &FusionTransformer,
    regions: &RegionSet,
    tag_ids: &[u32],
    text_ids: &[u32],
) -> Result<f64> {
    let input = assemble_input(text_ids, tag_ids, regions, Task::Retrieval, model.config())?;
    let out = model.forward(&input)?;
    let logits = model.itm_logits(&out.pooled);
    // Two-way softmax probability of the "matched" class.
    Ok(sigmoid_scalar(logits[1] - logits[0]))
}

/// Candidate ranking for one query, with per-cutoff hit indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query: usize,
    /// Candidate ids by descending score; ties order by lower id.
    pub ranked: Vec<usize>,
    /// `(k, 0.0 or 1.0)`: whether the true match ranked in the top k.
    pub recall_at: Vec<(usize, f64)>,
}

/// Recall in both directions, aggregated and per query.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    /// Image queries ranking texts ("text retrieval"): `(k, R@k)`.
    pub image_to_text: Vec<(usize, f64)>,
    /// Text queries ranking images ("image retrieval"): `(k, R@k)`.
    pub text_to_image: Vec<(usize, f64)>,
    pub image_queries: Vec<RetrievalResult>,
    pub text_queries: Vec<RetrievalResult>,
}

/// Indices of `scores` by descending value; equal scores keep index order.
fn rank_descending(scores: &Array1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

fn rank_query(query: usize, scores: &Array1<f64>, truth: usize, ks: &[usize]) -> RetrievalResult {
    let ranked = rank_descending(scores);
    let position = ranked
        .iter()
        .position(|&c| c == truth)
        .expect("truth index validated against the matrix");
    let recall_at = ks
        .iter()
        .map(|&k| (k, if position < k { 1.0 } else { 0.0 }))
        .collect();
    RetrievalResult { query, ranked, recall_at }
}

/// Ranked recall at each cutoff in `ks`, both directions, from a complete
/// score matrix (`rows` = images, `columns` = texts) and the true pairs.
/// Every image and every text must appear in exactly one pair.
pub fn recall_at_k(
    scores: &Array2<f64>,
    pairs: &[(usize, usize)],
    ks: &[usize],
) -> Result<RecallReport> {
    let (n_images, n_texts) = scores.dim();
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no recall cutoffs requested".into()));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArgument("recall cutoff 0 is meaningless".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let mut text_of = vec![None; n_images];
    let mut image_of = vec![None; n_texts];
    for &(i, t) in pairs {
        if i >= n_images || t >= n_texts {
            return Err(Error::InvalidArgument(format!(
                "pair ({i}, {t}) outside the {n_images}x{n_texts} score matrix"
            )));
        }
        if text_of[i].replace(t).is_some() {
            return Err(Error::InvalidArgument(format!("image {i} has two ground truths")));
        }
        if image_of[t].replace(i).is_some() {
            return Err(Error::InvalidArgument(format!("text {t} has two ground truths")));
        }
    }
    let text_of: Vec<usize> = text_of
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::InvalidArgument(format!("image {i} has no ground truth"))))
        .collect::<Result<_>>()?;
    let image_of: Vec<usize> = image_of
        .into_iter()
        .enumerate()
        .map(|(t, i)| i.ok_or_else(|| Error::InvalidArgument(format!("text {t} has no ground truth"))))
        .collect::<Result<_>>()?;

    let image_queries: Vec<RetrievalResult> = (0..n_images)
        .map(|i| rank_query(i, &scores.row(i).to_owned(), text_of[i], &ks))
        .collect();
    let text_queries: Vec<RetrievalResult> = (0..n_texts)
        .map(|t| rank_query(t, &scores.column(t).to_owned(), image_of[t], &ks))
        .collect();

    let aggregate = |queries: &[RetrievalResult]| -> Vec<(usize, f64)> {
        ks.iter()
            .enumerate()
            .map(|(pos, &k)| {
                let hits: f64 = queries.iter().map(|q| q.recall_at[pos].1).sum();
                (k, hits / queries.len() as f64)
            })
            .collect()
    };
    Ok(RecallReport {
        image_to_text: aggregate(&image_queries),
        text_to_image: aggregate(&text_queries),
        image_queries,
        text_queries,
    })
}
