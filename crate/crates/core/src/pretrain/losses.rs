//! The two pretraining losses and the contrastive-pair corruption that
//! feeds the second one.
//!
//! Masked-token loss is the mean cross-entropy over masked positions only;
//! an empty mask set yields zero loss with an explicit warning flag rather
//! than a silent zero. The match loss is a two-way cross-entropy on the
//! pooled representation, class 1 = original pair, class 0 = corrupted.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::act::log_sum_exp;

/// Mean masked-token cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss {
    pub value: f64,
    /// How many positions contributed.
    pub masked: usize,
    /// True when no positions were masked: the loss is defined as 0, but
    /// callers should know the batch carried no signal.
    pub empty_warning: bool,
}

/// Loss plus the logit gradient of the mean cross-entropy:
/// `(softmax - onehot) / masked`.
pub fn mlm_loss_and_grad(
    logits: &Array2<f64>,
    labels: &[u32],
) -> Result<(MlmLoss, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let vocab = logits.ncols();
    let mut grad = Array2::zeros(logits.raw_dim());
    if labels.is_empty() {
        return Ok((MlmLoss { value: 0.0, masked: 0, empty_warning: true }, grad));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= vocab {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside the {vocab}-entry vocabulary"
            )));
        }
        let row = logits.row(r);
        let row_slice = row.as_slice().expect("contiguous logits");
        let lse = log_sum_exp(row_slice);
        total += lse - row[label];
        for c in 0..vocab {
            let p = (row[c] - lse).exp();
            grad[[r, c]] = (p - if c == label { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((MlmLoss { value: total / n, masked: labels.len(), empty_warning: false }, grad))
}

/// Loss only, for callers that do not train.
pub fn mlm_loss(logits: &Array2<f64>, labels: &[u32]) -> Result<MlmLoss> {
    mlm_loss_and_grad(logits, labels).map(|(l, _)| l)
}

/// Two-way match cross-entropy for one example. `matched` selects class 1.
/// Returns the loss and the logit gradient `softmax - onehot`.
pub fn itm_loss_and_grad(logits: &Array1<f64>, matched: bool) -> Result<(f64, Array1<f64>)> {
    if logits.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "match head emits 2 logits, got {}",
            logits.len()
        )));
    }
    let target = usize::from(matched);
    let slice = logits.as_slice().expect("contiguous logits");
    let lse = log_sum_exp(slice);
    let loss = lse - logits[target];
    let mut grad = Array1::zeros(2);
    for c in 0..2 {
        grad[c] = (logits[c] - lse).exp() - if c == target { 1.0 } else { 0.0 };
    }
    Ok((loss, grad))
}

pub fn itm_loss(logits: &Array1<f64>, matched: bool) -> Result<f64> {
    itm_loss_and_grad(logits, matched).map(|(l, _)| l)
}

/// Which caption an example should be paired with for the match task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItmAssignment {
    /// Index of the example donating the caption (== own index if matched).
    pub donor: usize,
    /// True when the pair is the original one.
    pub matched: bool,
}

/// Independently corrupt each example with probability `prob`: a corrupted
/// example takes the caption of a uniformly drawn *different* example
/// (tags and regions stay put — they are image-derived). Requires at least
/// two examples so corruption is always possible.
pub fn itm_corrupt(
    batch_len: usize,
    prob: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<ItmAssignment>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!("corruption probability {prob} outside [0, 1]")));
    }
    if batch_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive corruption needs at least 2 examples, got {batch_len}"
        )));
    }
    let mut out = Vec::with_capacity(batch_len);
    for i in 0..batch_len {
        if rng.random::<f64>() < prob {
            // Uniform over the other batch_len - 1 examples.
            let mut donor = rng.random_range(0..batch_len - 1);
            if donor >= i {
                donor += 1;
            }
            out.push(ItmAssignment { donor, matched: false });
        } else {
            out.push(ItmAssignment { donor: i, matched: true });
        }
    }
    Ok(out)
}
