//! Task-specific heads and inference procedures on top of the fusion
//! transformer: caption generation, visual question answering, two-image
//! reasoning, and image-text retrieval, plus a smoke-test n-gram overlap
//! metric.
//!
//! Heads are pure given weights; every entry point accepts an empty
//! region set.

pub mod bleu;
pub mod caption;
pub mod nlvr2;
pub mod retrieval;
pub mod vqa;

pub use bleu::ngram_bleu;
pub use caption::{caption_generate, CaptionConfig, CaptionState};
pub use nlvr2::{nlvr2_predict, Nlvr2Head, Nlvr2Prediction};
pub use retrieval::{recall_at_k, retrieval_score, RecallReport, RetrievalResult};
pub use vqa::{vqa_loss, vqa_loss_and_grad, vqa_predict, VqaHead, VqaPrediction, VQA_ANSWER_COUNT};

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax_tie_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
