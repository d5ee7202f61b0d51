//! Local byte fusion encoder front-ends.
//!
//! * n-gram convolutional fusion: a shallow encoder of `shallow_layers`
//!   layers, four non-overlapping convolutions of width (= stride) 1..4 whose
//!   outputs are repeated in place back to the input length, a learned
//!   scalar-weighted sum, then the remaining encoder layers.
//! * word-span fusion: the first `word_layers` encoder layers attend only
//!   within word spans (block-diagonal mask), the remaining layers attend
//!   over the whole sentence.

use rand::Rng;

use crate::bytes_tok::{Span, WordSpanMap};
use crate::model::FusionKind;
use crate::model::{Ctx, Decay, ModelError, ParamId, ParamStore, Seq2Seq, SourceBatch};
use crate::tensor::{AttnMask, Float, Tensor, Var};

/// Widths of the fusion convolutions.
pub const NGRAM_WIDTHS: [usize; 4] = [1, 2, 3, 4];

/// Parameters of the n-gram fusion: `fusion.ncf.conv{n}.{weight,bias}` with
/// weight shape `[n, d, d]`, and `fusion.ncf.lambda` of shape `[4]`.
#[derive(Debug, Clone)]
pub struct NcfParams {
    pub kernels: [ParamId; 4],
    pub biases: [ParamId; 4],
    pub lambda: ParamId,
}

impl NcfParams {
    pub(crate) fn register<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, d: usize) -> Self {
        let mut kernels = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for n in NGRAM_WIDTHS {
            kernels.push(store.add(
                &format!("fusion.ncf.conv{n}.weight"),
                crate::model::params_xavier(rng, &[n, d, d], n * d, d),
                Decay::Apply,
            ));
            biases.push(store.add(&format!("fusion.ncf.conv{n}.bias"), Tensor::zeros(&[d]), Decay::Apply));
        }
        let lambda = store.add("fusion.ncf.lambda", Tensor::full(&[4], T::of(0.25)), Decay::Exempt);
        Self {
            kernels: kernels.try_into().expect("four kernels"),
            biases: biases.try_into().expect("four biases"),
            lambda,
        }
    }
}

/// Current mixture weights λ¹..λ⁴.
pub fn lambda_weights<T: Float>(params: &NcfParams, store: &ParamStore<T>) -> [T; 4] {
    let v = store.get(params.lambda).data();
    [v[0], v[1], v[2], v[3]]
}

/// Convolve, repeat, truncate and mix. `s` holds `batch` sequences of
/// `len` rows; rows with `keep == false` (padding) are zeroed first so every
/// sentence sees the same zero right-padding regardless of batch shape.
pub fn ncf_fuse<T: Float>(
    ctx: &mut Ctx<'_, T>,
    s: Var,
    params: &NcfParams,
    batch: usize,
    len: usize,
    keep: &[bool],
) -> Result<Var, ModelError> {
    if len == 0 || batch == 0 {
        return Err(ModelError::Input("n-gram fusion needs a non-empty sequence".into()));
    }
    let s = ctx.g.mask_rows(s, keep)?;
    let mut parts = Vec::with_capacity(4);
    for (i, n) in NGRAM_WIDTHS.into_iter().enumerate() {
        let (k, b) = (ctx.p(params.kernels[i]), ctx.p(params.biases[i]));
        let conv = ctx.g.conv1d(s, k, Some(b), n, true, batch)?;
        parts.push(ctx.g.repeat_rows(conv, n, len, batch)?);
    }
    let lambda = ctx.p(params.lambda);
    Ok(ctx.g.weighted_sum(&parts, lambda)?)
}

/// `N × N` allowed/blocked matrix: `true` iff both positions fall in the
/// same span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    len: usize,
    allowed: Vec<bool>,
}

impl BlockMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    /// As a single-sentence attention mask.
    pub fn to_attn_mask(&self) -> AttnMask {
        AttnMask::new(1, self.len, self.len, self.allowed.clone()).expect("square mask")
    }
}

/// Block-diagonal mask from spans that must partition `[0, seq_len)`. With
/// `with_specials` the mask covers `BOS text EOS`, the two specials being
/// singleton blocks.
pub fn build_block_mask(spans: &[Span], seq_len: usize, with_specials: bool) -> Result<BlockMask, ModelError> {
    let map = WordSpanMap::new(spans.to_vec(), seq_len)?;
    let map = if with_specials { map.with_specials() } else { map };
    Ok(block_mask(&map))
}

pub fn block_mask(spans: &WordSpanMap) -> BlockMask {
    let ids = spans.span_ids();
    let n = ids.len();
    let mut allowed = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            allowed.push(ids[i] == ids[j]);
        }
    }
    BlockMask { len: n, allowed }
}

/// Batched word-span mask: same-span, non-PAD pairs only.
pub fn batch_block_mask(src: &SourceBatch) -> Result<AttnMask, ModelError> {
    if src.spans.len() != src.batch {
        return Err(ModelError::Input(format!(
            "{} span maps for a batch of {}",
            src.spans.len(),
            src.batch
        )));
    }
    let n = src.len;
    let mut span_ids = Vec::with_capacity(src.batch);
    for (b, spans) in src.spans.iter().enumerate() {
        let content = src.ids[b * n..(b + 1) * n]
            .iter()
            .filter(|&&id| id != crate::bytes_tok::PAD)
            .count();
        if spans.seq_len() != content {
            return Err(ModelError::Input(format!(
                "row {b}: spans cover {} positions but the sequence has {content}",
                spans.seq_len()
            )));
        }
        span_ids.push(spans.span_ids());
    }
    Ok(AttnMask::from_fn(src.batch, n, n, |b, i, j| {
        let ids = &span_ids[b];
        i < ids.len() && j < ids.len() && ids[i] == ids[j]
    }))
}

impl<T: Float> Seq2Seq<T> {
    /// Shallow encoding, n-gram fusion, remaining layers. Returns the
    /// pre-norm encoder output.
    pub fn ncf_encode(&self, ctx: &mut Ctx<'_, T>, x: Var, src: &SourceBatch) -> Result<Var, ModelError> {
        let params = self
            .ncf
            .as_ref()
            .ok_or_else(|| ModelError::Config("model was not built with n-gram fusion".into()))?;
        let shallow = self.config().shallow_layers;
        let mask = src.pad_mask();
        let s = self.encode(ctx, x, 0..shallow, &mask)?;
        let fused = ncf_fuse(ctx, s, params, src.batch, src.len, &src.keep_rows())?;
        self.encode(ctx, fused, shallow..self.encoder.len(), &mask)
    }

    /// Block-masked lower layers, full-attention upper layers. Returns the
    /// pre-norm encoder output.
    pub fn wsf_encode(&self, ctx: &mut Ctx<'_, T>, x: Var, src: &SourceBatch) -> Result<Var, ModelError> {
        if self.config().fusion != FusionKind::Wsf {
            return Err(ModelError::Config("model was not built with word fusion".into()));
        }
        let word = self.config().word_layers;
        let block = batch_block_mask(src)?;
        let f = self.encode(ctx, x, 0..word, &block)?;
        self.encode(ctx, f, word..self.encoder.len(), &src.pad_mask())
    }

    /// λ¹..λ⁴, when the model uses n-gram fusion.
    pub fn lambda_weights(&self) -> Option<[T; 4]> {
        self.ncf.as_ref().map(|p| lambda_weights(p, self.params()))
    }
}
