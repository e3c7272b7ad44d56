//! Assembly of the joint text+region sequence consumed by the fusion
//! transformer.
//!
//! Layout: `[CLS] sentence [SEP] tags [SEP] region…`. Text positions carry
//! sequential position ids; region positions carry none (their geometry
//! enters through the box encoding appended to each feature row). Segment
//! ids: 0 for the sentence block (including `[CLS]` and the first `[SEP]`),
//! 2 for the tag block (including the closing `[SEP]`), 1 for regions.
//!
//! When the combined length exceeds the position budget, sentence tokens are
//! dropped first (from the end), then tag tokens; regions are never dropped.

use ndarray::Array2;

use crate::config::{TransformerConfig, BOX_ENCODING_DIM};
use crate::detector::regions::RegionSet;
use crate::error::{Error, Result};

use super::tokenizer::{CLS_ID, SEP_ID};

/// Segment id for the sentence block.
pub const SEGMENT_SENTENCE: u8 = 0;
/// Segment id for region positions.
pub const SEGMENT_REGION: u8 = 1;
/// Segment id for the object-tag block.
pub const SEGMENT_TAG: u8 = 2;

/// What the assembled sequence will be used for; selects the attention mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    PretrainMlm,
    PretrainItm,
    Caption,
    Vqa,
    Nlvr2,
    Retrieval,
}

impl Task {
    /// Captioning is the only task with a one-directional sentence block.
    pub fn causal_sentence(self) -> bool {
        matches!(self, Task::Caption)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain-mlm" => Task::PretrainMlm,
            "pretrain-itm" => Task::PretrainItm,
            "caption" => Task::Caption,
            "vqa" => Task::Vqa,
            "nlvr2" => Task::Nlvr2,
            "retrieval" => Task::Retrieval,
            other => return Err(Error::UnknownTask(other.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::PretrainMlm => "pretrain-mlm",
            Task::PretrainItm => "pretrain-itm",
            Task::Caption => "caption",
            Task::Vqa => "vqa",
            Task::Nlvr2 => "nlvr2",
            Task::Retrieval => "retrieval",
        }
    }
}

/// How many tokens truncation removed from each text block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Truncation {
    pub sentence_dropped: usize,
    pub tags_dropped: usize,
}

/// One assembled sequence: text ids plus raw region feature rows, with the
/// task-specific attention mask.
#[derive(Debug, Clone)]
pub struct FusionInput {
    /// `[CLS] sentence [SEP] tags [SEP]` — the text portion only.
    pub token_ids: Vec<u32>,
    /// Segment id per text position.
    pub segment_ids: Vec<u8>,
    /// Position id per text position (0, 1, 2, …).
    pub position_ids: Vec<u32>,
    /// Raw region rows, `(regions, feature_dim + 6)`: detector feature
    /// concatenated with the normalized box encoding. Projected to the model
    /// width inside the transformer.
    pub region_rows: Array2<f64>,
    /// `(total, total)` mask; `mask[i][j] = 1` iff position `i` may attend
    /// to position `j`. Regions follow the text positions.
    pub attention_mask: Array2<f64>,
    /// Sentence token count (between `[CLS]` and the first `[SEP]`).
    pub sentence_len: usize,
    /// Tag token count (between the two `[SEP]`s).
    pub tag_len: usize,
    pub truncation: Truncation,
}

impl FusionInput {
    pub fn text_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn region_count(&self) -> usize {
        self.region_rows.nrows()
    }

    pub fn total_len(&self) -> usize {
        self.text_len() + self.region_count()
    }

    /// Length of the causal block under captioning: `[CLS] sentence [SEP]`.
    pub fn sentence_block_len(&self) -> usize {
        self.sentence_len + 2
    }
}

/// Encode region geometry as six normalized values per box:
/// `(x1/W, y1/H, x2/W, y2/H, w/W, h/H)`, all in `[0, 1]`.
pub fn encode_box_positions(set: &RegionSet) -> Result<Array2<f64>> {
    if set.image_width == 0 || set.image_height == 0 {
        return Err(Error::InvalidArgument(
            "box encoding requires a positive image extent".into(),
        ));
    }
    let w = f64::from(set.image_width);
    let h = f64::from(set.image_height);
    let mut out = Array2::zeros((set.regions.len(), BOX_ENCODING_DIM));
    for (i, r) in set.regions.iter().enumerate() {
        let [x1, y1, x2, y2] = r.bbox.map(f64::from);
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::InvalidArgument(format!(
                "region {i} has a degenerate box {:?}",
                r.bbox
            )));
        }
        let row = [x1 / w, y1 / h, x2 / w, y2 / h, (x2 - x1) / w, (y2 - y1) / h];
        for (j, v) in row.into_iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "region {i} encodes out of [0,1]: component {j} = {v}"
                )));
            }
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

/// Build the joint input from tokenized sentence text, tag tokens, and the
/// detector's region set.
pub fn assemble_input(
    sentence_ids: &[u32],
    tag_ids: &[u32],
    regions: &RegionSet,
    task: Task,
    cfg: &TransformerConfig,
) -> Result<FusionInput> {
    if regions.feature_dim as usize != cfg.region_feature_dim {
        return Err(Error::InvalidArgument(format!(
            "region feature width {} does not match the configured {}",
            regions.feature_dim, cfg.region_feature_dim
        )));
    }
    let k = regions.regions.len();
    let budget = cfg.max_positions;

    // [CLS] + sentence + [SEP] + tags + [SEP] + regions
    let fixed = 3 + k;
    if fixed > budget {
        return Err(Error::InvalidArgument(format!(
            "{k} regions plus 3 structural tokens exceed the {budget}-position budget; \
             regions are never truncated"
        )));
    }
    let text_room = budget - fixed;
    let mut sentence = sentence_ids.to_vec();
    let mut tags = tag_ids.to_vec();
    let mut truncation = Truncation::default();
    if sentence.len() + tags.len() > text_room {
        let drop = (sentence.len() + tags.len() - text_room).min(sentence.len());
        sentence.truncate(sentence.len() - drop);
        truncation.sentence_dropped = drop;
    }
    if sentence.len() + tags.len() > text_room {
        let drop = sentence.len() + tags.len() - text_room;
        tags.truncate(tags.len() - drop);
        truncation.tags_dropped = drop;
    }

    let mut token_ids = Vec::with_capacity(3 + sentence.len() + tags.len());
    let mut segment_ids = Vec::with_capacity(token_ids.capacity());
    token_ids.push(CLS_ID);
    segment_ids.push(SEGMENT_SENTENCE);
    token_ids.extend_from_slice(&sentence);
    segment_ids.extend(std::iter::repeat_n(SEGMENT_SENTENCE, sentence.len()));
    token_ids.push(SEP_ID);
    segment_ids.push(SEGMENT_SENTENCE);
    token_ids.extend_from_slice(&tags);
    segment_ids.extend(std::iter::repeat_n(SEGMENT_TAG, tags.len()));
    token_ids.push(SEP_ID);
    segment_ids.push(SEGMENT_TAG);
    let position_ids: Vec<u32> = (0..token_ids.len() as u32).collect();

    let boxes = encode_box_positions(regions)?;
    let mut region_rows = Array2::zeros((k, cfg.region_feature_dim + BOX_ENCODING_DIM));
    for (i, r) in regions.regions.iter().enumerate() {
        for (j, &v) in r.feature.iter().enumerate() {
            region_rows[[i, j]] = f64::from(v);
        }
        for j in 0..BOX_ENCODING_DIM {
            region_rows[[i, cfg.region_feature_dim + j]] = boxes[[i, j]];
        }
    }

    let sentence_block = sentence.len() + 2;
    let total = token_ids.len() + k;
    let attention_mask = attention_mask_for_task(task, sentence_block, total);

    Ok(FusionInput {
        token_ids,
        segment_ids,
        position_ids,
        region_rows,
        attention_mask,
        sentence_len: sentence.len(),
        tag_len: tags.len(),
        truncation,
    })
}

/// Build the `(total, total)` attention mask for one task.
///
/// Every task except captioning is fully bidirectional. Under captioning the
/// sentence block (`[CLS] sentence [SEP]`, the first `sentence_block` rows)
/// attends causally within itself plus freely to the context (tags and
/// regions), while context positions attend only among themselves — the
/// sentence stays invisible to them so generated prefixes cannot leak into
/// the context encoding.
pub fn attention_mask_for_task(task: Task, sentence_block: usize, total: usize) -> Array2<f64> {
    assert!(sentence_block <= total, "sentence block exceeds sequence");
    let mut mask = Array2::ones((total, total));
    if task.causal_sentence() {
        for i in 0..total {
            for j in 0..sentence_block {
                let visible = if i < sentence_block { j <= i } else { false };
                if !visible {
                    mask[[i, j]] = 0.0;
                }
            }
        }
    }
    mask
}
