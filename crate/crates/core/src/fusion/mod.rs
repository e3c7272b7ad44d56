//! The cross-modal fusion transformer: a BERT-family encoder over the joint
//! `[CLS] sentence [SEP] tags [SEP] region…` sequence.
//!
//! Text positions embed as word + position + segment vectors; region
//! positions project their raw feature-plus-box rows through a learned linear
//! map and add the region segment vector (no position embedding — geometry
//! lives in the box encoding). One shared layer norm covers all embedded
//! positions, then `layers` post-norm encoder blocks (multi-head attention
//! and a GELU feed-forward, each followed by residual + layer norm), a tanh
//! pooler over the `[CLS]` state, a masked-token prediction head applied at
//! requested text positions, and a two-way match head over the pooled vector.
//!
//! Forward passes feed the thread-local multiply counter: the four attention
//! projections and both feed-forward layers count through `Linear`, and the
//! two attention matmuls (scores and context) are recorded per head, so an
//! instrumented forward reproduces the closed-form cost tally exactly.
//! Backward passes are explicit, mirror the forward caches, and are
//! finite-difference checked in the tests.

pub mod input;
pub mod tokenizer;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::config::{TransformerConfig, BOX_ENCODING_DIM};
use crate::error::{Error, Result};
use crate::nn::act::{gelu_grad_scalar, gelu_scalar, softmax_slice};
use crate::nn::linear::LinearCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::{
    record_muls, scope, Init, Initializer, LayerNorm, Linear, ParamTensor, Params,
};

pub use input::{
    assemble_input, attention_mask_for_task, encode_box_positions, FusionInput, Task, Truncation,
    SEGMENT_REGION, SEGMENT_SENTENCE, SEGMENT_TAG,
};
pub use tokenizer::{Tokenizer, TokenizerMode, Vocab, CLS_ID, MASK_ID, PAD_ID, SEP_ID, UNK_ID};

/// Additive attention bias for masked pairs; large enough that softmax
/// yields exactly zero probability in `f64`.
const MASK_BIAS: f64 = -1e30;

/// Lookup table with gradient accumulation by row.
struct Embedding {
    table: Array2<f64>,
    grad: Array2<f64>,
}

impl Embedding {
    fn new(vocab: usize, dim: usize, init: &mut Initializer) -> Self {
        Embedding { table: init.weight2((vocab, dim)), grad: Array2::zeros((vocab, dim)) }
    }

    fn row(&self, id: usize) -> ndarray::ArrayView1<'_, f64> {
        self.table.row(id)
    }

    fn scatter(&mut self, id: usize, d: ndarray::ArrayView1<'_, f64>) {
        let mut g = self.grad.row_mut(id);
        g += &d;
    }
}

impl Params for Embedding {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        f(ParamTensor::new(scope(prefix, "weight"), &mut self.table, &mut self.grad));
    }
}

/// Inverted dropout mask: entries are 0 with probability `p`, else
/// `1/(1-p)`, so expectations are preserved and inference applies nothing.
fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    })
}

/// One post-norm encoder block.
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    attn_norm: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ffn_norm: LayerNorm,
    heads: usize,
}

struct LayerCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention probabilities, one `(T, T)` matrix per head.
    probs: Vec<Array2<f64>>,
    o_cache: LinearCache,
    attn_drop: Option<Array2<f64>>,
    attn_norm_cache: LayerNormCache,
    ff1_cache: LinearCache,
    /// Pre-GELU feed-forward activations.
    h_pre: Array2<f64>,
    ff2_cache: LinearCache,
    ffn_drop: Option<Array2<f64>>,
    ffn_norm_cache: LayerNormCache,
}

impl EncoderLayer {
    fn new(cfg: &TransformerConfig, init: &mut Initializer) -> Self {
        let d = cfg.hidden;
        EncoderLayer {
            q: Linear::new(d, d, true, init),
            k: Linear::new(d, d, true, init),
            v: Linear::new(d, d, true, init),
            o: Linear::new(d, d, true, init),
            attn_norm: LayerNorm::new(d, init),
            ff1: Linear::new(d, cfg.intermediate, true, init),
            ff2: Linear::new(cfg.intermediate, d, true, init),
            ffn_norm: LayerNorm::new(d, init),
            heads: cfg.heads,
        }
    }

    fn forward_cached(
        &self,
        x: &Array2<f64>,
        mask_bias: &Array2<f64>,
        mut rng: Option<&mut ChaCha20Rng>,
        dropout: f64,
    ) -> (Array2<f64>, LayerCache) {
        let t = x.nrows();
        let d = x.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (q, q_cache) = self.q.forward_cached(x);
        let (k, k_cache) = self.k.forward_cached(x);
        let (v, v_cache) = self.v.forward_cached(x);

        let mut ctx = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qs = q.slice(cols);
            let ks = k.slice(cols);
            let vs = v.slice(cols);
            record_muls((t * t * dh) as u64);
            let mut scores = qs.dot(&ks.t());
            scores.mapv_inplace(|s| s * scale);
            scores += mask_bias;
            for mut row in scores.axis_iter_mut(Axis(0)) {
                softmax_slice(row.as_slice_mut().expect("contiguous score row"));
            }
            record_muls((t * t * dh) as u64);
            ctx.slice_mut(cols).assign(&scores.dot(&vs));
            probs.push(scores);
        }

        let (mut o, o_cache) = self.o.forward_cached(&ctx);
        let attn_drop = rng.as_deref_mut().map(|r| dropout_mask(t, d, dropout, r));
        if let Some(m) = &attn_drop {
            o *= m;
        }
        let (attn_out, attn_norm_cache) = self.attn_norm.forward_cached(&(&o + x));

        let (h_pre, ff1_cache) = self.ff1.forward_cached(&attn_out);
        let g = h_pre.mapv(gelu_scalar);
        let (mut f, ff2_cache) = self.ff2.forward_cached(&g);
        let ffn_drop = rng.as_deref_mut().map(|r| dropout_mask(t, d, dropout, r));
        if let Some(m) = &ffn_drop {
            f *= m;
        }
        let (y, ffn_norm_cache) = self.ffn_norm.forward_cached(&(&f + &attn_out));

        (
            y,
            LayerCache {
                q_cache,
                k_cache,
                v_cache,
                q,
                k,
                v,
                probs,
                o_cache,
                attn_drop,
                attn_norm_cache,
                ff1_cache,
                h_pre,
                ff2_cache,
                ffn_drop,
                ffn_norm_cache,
            },
        )
    }

    fn backward(&mut self, cache: &LayerCache, dy: &Array2<f64>) -> Array2<f64> {
        let t = dy.nrows();
        let d = dy.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // Feed-forward half.
        let d_res2 = self.ffn_norm.backward(&cache.ffn_norm_cache, dy);
        let mut d_f = d_res2.clone();
        if let Some(m) = &cache.ffn_drop {
            d_f *= m;
        }
        let d_g = self.ff2.backward(&cache.ff2_cache, &d_f);
        let d_h = &d_g * &cache.h_pre.mapv(gelu_grad_scalar);
        let mut d_attn_out = self.ff1.backward(&cache.ff1_cache, &d_h);
        d_attn_out += &d_res2;

        // Attention half.
        let d_res1 = self.attn_norm.backward(&cache.attn_norm_cache, &d_attn_out);
        let mut d_o = d_res1.clone();
        if let Some(m) = &cache.attn_drop {
            d_o *= m;
        }
        let d_ctx = self.o.backward(&cache.o_cache, &d_o);

        let mut d_q = Array2::zeros((t, d));
        let mut d_k = Array2::zeros((t, d));
        let mut d_v = Array2::zeros((t, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let d_ctx_h = d_ctx.slice(cols);
            let vs = cache.v.slice(cols);
            d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
            let d_p = d_ctx_h.dot(&vs.t());
            // Softmax backward, row-wise: ds = p ⊙ (dp − Σ p⊙dp).
            let mut d_scores = Array2::zeros((t, t));
            for r in 0..t {
                let pr = p.row(r);
                let dpr = d_p.row(r);
                let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                for c in 0..t {
                    d_scores[[r, c]] = pr[c] * (dpr[c] - dot) * scale;
                }
            }
            let qs = cache.q.slice(cols);
            let ks = cache.k.slice(cols);
            d_q.slice_mut(cols).assign(&d_scores.dot(&ks));
            d_k.slice_mut(cols).assign(&d_scores.t().dot(&qs));
        }

        let mut dx = d_res1;
        dx += &self.q.backward(&cache.q_cache, &d_q);
        dx += &self.k.backward(&cache.k_cache, &d_k);
        dx += &self.v.backward(&cache.v_cache, &d_v);
        dx
    }
}

impl Params for EncoderLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        self.q.visit_params(&scope(prefix, "attn.q"), f);
        self.k.visit_params(&scope(prefix, "attn.k"), f);
        self.v.visit_params(&scope(prefix, "attn.v"), f);
        self.o.visit_params(&scope(prefix, "attn.o"), f);
        self.attn_norm.visit_params(&scope(prefix, "attn_norm"), f);
        self.ff1.visit_params(&scope(prefix, "ffn.ff1"), f);
        self.ff2.visit_params(&scope(prefix, "ffn.ff2"), f);
        self.ffn_norm.visit_params(&scope(prefix, "ffn_norm"), f);
    }
}

/// Final hidden states plus the pooled `[CLS]` vector.
pub struct FusionOutput {
    /// `(total, hidden)` — text positions first, then regions.
    pub hidden: Array2<f64>,
    /// `tanh(W h_cls + b)`.
    pub pooled: Array1<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct FusionCache {
    token_ids: Vec<usize>,
    position_ids: Vec<usize>,
    segment_ids: Vec<usize>,
    region_count: usize,
    region_proj_cache: LinearCache,
    emb_norm_cache: LayerNormCache,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    pooler_cache: LinearCache,
    pooled: Array1<f64>,
}

/// Cache for the masked-token head at a set of gathered positions.
pub struct MlmCache {
    positions: Vec<usize>,
    transform_cache: LinearCache,
    h_pre: Array2<f64>,
    norm_cache: LayerNormCache,
    decoder_cache: LinearCache,
}

impl MlmCache {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

/// Cache for the match head.
pub struct ItmCache {
    cache: LinearCache,
}

pub struct FusionTransformer {
    cfg: TransformerConfig,
    word: Embedding,
    position: Embedding,
    segment: Embedding,
    emb_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    region_proj: Linear,
    pooler: Linear,
    mlm_transform: Linear,
    mlm_norm: LayerNorm,
    mlm_decoder: Linear,
    itm: Linear,
}

impl FusionTransformer {
    pub fn new(cfg: TransformerConfig, init: Init) -> Result<Self> {
        cfg.validate()?;
        let mut ini = Initializer::new(init);
        let d = cfg.hidden;
        let word = Embedding::new(cfg.vocab_size, d, &mut ini);
        let position = Embedding::new(cfg.max_positions, d, &mut ini);
        let segment = Embedding::new(cfg.type_vocab_size, d, &mut ini);
        let emb_norm = LayerNorm::new(d, &mut ini);
        let layers = (0..cfg.layers).map(|_| EncoderLayer::new(&cfg, &mut ini)).collect();
        let region_proj =
            Linear::new(cfg.region_feature_dim + BOX_ENCODING_DIM, d, true, &mut ini);
        let pooler = Linear::new(d, d, true, &mut ini);
        let mlm_transform = Linear::new(d, d, true, &mut ini);
        let mlm_norm = LayerNorm::new(d, &mut ini);
        let mlm_decoder = Linear::new(d, cfg.vocab_size, true, &mut ini);
        let itm = Linear::new(d, 2, true, &mut ini);
        Ok(FusionTransformer {
            cfg,
            word,
            position,
            segment,
            emb_norm,
            layers,
            region_proj,
            pooler,
            mlm_transform,
            mlm_norm,
            mlm_decoder,
            itm,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    fn validate_input(&self, input: &FusionInput) -> Result<()> {
        let text = input.token_ids.len();
        if input.segment_ids.len() != text || input.position_ids.len() != text {
            return Err(Error::InvalidArgument(
                "token, segment, and position id lengths differ".into(),
            ));
        }
        for &id in &input.token_ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside the {}-entry vocabulary",
                    self.cfg.vocab_size
                )));
            }
        }
        for &p in &input.position_ids {
            if p as usize >= self.cfg.max_positions {
                return Err(Error::InvalidArgument(format!(
                    "position id {p} exceeds the {}-position budget",
                    self.cfg.max_positions
                )));
            }
        }
        for &sg in &input.segment_ids {
            if usize::from(sg) >= self.cfg.type_vocab_size {
                return Err(Error::InvalidArgument(format!("segment id {sg} out of range")));
            }
        }
        let expect = self.cfg.region_feature_dim + BOX_ENCODING_DIM;
        if input.region_rows.ncols() != expect {
            return Err(Error::InvalidArgument(format!(
                "region rows are {} wide, expected {expect}",
                input.region_rows.ncols()
            )));
        }
        let total = input.total_len();
        if input.attention_mask.shape() != [total, total] {
            return Err(Error::InvalidArgument(format!(
                "attention mask is {:?}, expected ({total}, {total})",
                input.attention_mask.shape()
            )));
        }
        if input.attention_mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("attention mask entries must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Inference forward: no dropout, cache discarded.
    pub fn forward(&self, input: &FusionInput) -> Result<FusionOutput> {
        self.forward_cached(input, None).map(|(out, _)| out)
    }

    /// Forward pass keeping the backward cache. Pass an RNG to enable
    /// dropout (training); `None` runs deterministically.
    pub fn forward_cached(
        &self,
        input: &FusionInput,
        mut rng: Option<&mut ChaCha20Rng>,
    ) -> Result<(FusionOutput, FusionCache)> {
        self.validate_input(input)?;
        let text = input.text_len();
        let k = input.region_count();
        let total = text + k;
        let d = self.cfg.hidden;

        let token_ids: Vec<usize> = input.token_ids.iter().map(|&t| t as usize).collect();
        let position_ids: Vec<usize> = input.position_ids.iter().map(|&p| p as usize).collect();
        let segment_ids: Vec<usize> = input.segment_ids.iter().map(|&sg| usize::from(sg)).collect();

        let mut x = Array2::zeros((total, d));
        for i in 0..text {
            let mut row = x.row_mut(i);
            row += &self.word.row(token_ids[i]);
            row += &self.position.row(position_ids[i]);
            row += &self.segment.row(segment_ids[i]);
        }
        let (proj, region_proj_cache) = self.region_proj.forward_cached(&input.region_rows);
        let region_seg = self.segment.row(usize::from(SEGMENT_REGION)).to_owned();
        for i in 0..k {
            let mut row = x.row_mut(text + i);
            row += &proj.row(i);
            row += &region_seg;
        }

        let (mut x, emb_norm_cache) = self.emb_norm.forward_cached(&x);
        let dropout = self.cfg.dropout;
        let emb_drop = rng
            .as_deref_mut()
            .filter(|_| dropout > 0.0)
            .map(|r| dropout_mask(total, d, dropout, r));
        if let Some(m) = &emb_drop {
            x *= m;
        }

        let mask_bias = input.attention_mask.mapv(|m| (m - 1.0) * -MASK_BIAS);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let step_rng = rng.as_deref_mut().filter(|_| dropout > 0.0);
            let (y, cache) = layer.forward_cached(&x, &mask_bias, step_rng, dropout);
            x = y;
            layer_caches.push(cache);
        }

        let cls = x.row(0).insert_axis(Axis(0)).to_owned();
        let (pooled_pre, pooler_cache) = self.pooler.forward_cached(&cls);
        let pooled = pooled_pre.row(0).mapv(f64::tanh);

        Ok((
            FusionOutput { hidden: x, pooled: pooled.clone() },
            FusionCache {
                token_ids,
                position_ids,
                segment_ids,
                region_count: k,
                region_proj_cache,
                emb_norm_cache,
                emb_drop,
                layers: layer_caches,
                pooler_cache,
                pooled,
            },
        ))
    }

    /// Masked-token logits at the given (text) positions of `hidden`.
    pub fn mlm_logits(&self, hidden: &Array2<f64>, positions: &[usize]) -> Result<Array2<f64>> {
        self.mlm_logits_cached(hidden, positions).map(|(l, _)| l)
    }

    pub fn mlm_logits_cached(
        &self,
        hidden: &Array2<f64>,
        positions: &[usize],
    ) -> Result<(Array2<f64>, MlmCache)> {
        let d = self.cfg.hidden;
        let mut rows = Array2::zeros((positions.len(), d));
        for (i, &p) in positions.iter().enumerate() {
            if p >= hidden.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "masked position {p} outside the {}-row sequence",
                    hidden.nrows()
                )));
            }
            rows.row_mut(i).assign(&hidden.row(p));
        }
        let (h_pre, transform_cache) = self.mlm_transform.forward_cached(&rows);
        let g = h_pre.mapv(gelu_scalar);
        let (n, norm_cache) = self.mlm_norm.forward_cached(&g);
        let (logits, decoder_cache) = self.mlm_decoder.forward_cached(&n);
        Ok((
            logits,
            MlmCache {
                positions: positions.to_vec(),
                transform_cache,
                h_pre,
                norm_cache,
                decoder_cache,
            },
        ))
    }

    /// Backward through the masked-token head; returns gradients for the
    /// gathered hidden rows, aligned with `cache.positions()`.
    pub fn mlm_backward(&mut self, cache: &MlmCache, d_logits: &Array2<f64>) -> Array2<f64> {
        let d_n = self.mlm_decoder.backward(&cache.decoder_cache, d_logits);
        let d_g = self.mlm_norm.backward(&cache.norm_cache, &d_n);
        let d_h = &d_g * &cache.h_pre.mapv(gelu_grad_scalar);
        self.mlm_transform.backward(&cache.transform_cache, &d_h)
    }

    /// Two-way match logits over the pooled vector.
    pub fn itm_logits(&self, pooled: &Array1<f64>) -> Array1<f64> {
        self.itm.forward1(pooled)
    }

    pub fn itm_logits_cached(&self, pooled: &Array1<f64>) -> (Array1<f64>, ItmCache) {
        let x = pooled.view().insert_axis(Axis(0)).to_owned();
        let (y, cache) = self.itm.forward_cached(&x);
        (y.row(0).to_owned(), ItmCache { cache })
    }

    /// Backward through the match head; returns the pooled-vector gradient.
    pub fn itm_backward(&mut self, cache: &ItmCache, d_logits: &Array1<f64>) -> Array1<f64> {
        let dy = d_logits.view().insert_axis(Axis(0)).to_owned();
        self.itm.backward(&cache.cache, &dy).row(0).to_owned()
    }

    /// Backward through pooler, encoder, and embeddings. `d_hidden` is the
    /// gradient at the final hidden states (callers fold head gradients into
    /// it first); `d_pooled` is the gradient at the post-tanh pooled vector.
    pub fn backward(
        &mut self,
        cache: &FusionCache,
        mut d_hidden: Array2<f64>,
        d_pooled: Option<&Array1<f64>>,
    ) -> Result<()> {
        let text = cache.token_ids.len();
        let total = text + cache.region_count;
        if d_hidden.shape() != [total, self.cfg.hidden] {
            return Err(Error::InvalidArgument(format!(
                "hidden gradient is {:?}, expected ({total}, {})",
                d_hidden.shape(),
                self.cfg.hidden
            )));
        }

        if let Some(dp) = d_pooled {
            // d/dz tanh(z) = 1 - tanh^2(z).
            let d_pre: Array1<f64> = dp
                .iter()
                .zip(cache.pooled.iter())
                .map(|(g, t)| g * (1.0 - t * t))
                .collect();
            let d_cls =
                self.pooler.backward(&cache.pooler_cache, &d_pre.insert_axis(Axis(0)).to_owned());
            let mut row0 = d_hidden.row_mut(0);
            row0 += &d_cls.row(0);
        }

        for (layer, lcache) in self.layers.iter_mut().zip(cache.layers.iter()).rev() {
            d_hidden = layer.backward(lcache, &d_hidden);
        }

        if let Some(m) = &cache.emb_drop {
            d_hidden *= m;
        }
        let d_x = self.emb_norm.backward(&cache.emb_norm_cache, &d_hidden);

        for i in 0..text {
            let row = d_x.row(i);
            self.word.scatter(cache.token_ids[i], row);
            self.position.scatter(cache.position_ids[i], row);
            self.segment.scatter(cache.segment_ids[i], row);
        }
        if cache.region_count > 0 {
            let d_regions = d_x.slice(s![text.., ..]).to_owned();
            for i in 0..cache.region_count {
                self.segment.scatter(usize::from(SEGMENT_REGION), d_regions.row(i));
            }
            // Region features are data, not parameters: the input gradient
            // is discarded, but the projection weights accumulate.
            self.region_proj.backward(&cache.region_proj_cache, &d_regions);
        }
        Ok(())
    }

    /// Attention probabilities from a cached forward: `(layer, head)` →
    /// `(total, total)` row-stochastic matrix.
    pub fn attention_probs<'c>(
        &self,
        cache: &'c FusionCache,
        layer: usize,
        head: usize,
    ) -> &'c Array2<f64> {
        &cache.layers[layer].probs[head]
    }
}

impl Params for FusionTransformer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
        // Prefixes deliberately match the cost model component names.
        self.word.visit_params(&scope(prefix, "embeddings.word"), f);
        self.position.visit_params(&scope(prefix, "embeddings.position"), f);
        self.segment.visit_params(&scope(prefix, "embeddings.segment"), f);
        self.emb_norm.visit_params(&scope(prefix, "embeddings.norm"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&scope(prefix, &format!("encoder.layer{i}")), f);
        }
        self.region_proj.visit_params(&scope(prefix, "region_projection"), f);
        self.pooler.visit_params(&scope(prefix, "pooler"), f);
        self.mlm_transform.visit_params(&scope(prefix, "mlm_head.transform"), f);
        self.mlm_norm.visit_params(&scope(prefix, "mlm_head.norm"), f);
        self.mlm_decoder.visit_params(&scope(prefix, "mlm_head.decoder"), f);
        self.itm.visit_params(&scope(prefix, "itm_head"), f);
    }
}
