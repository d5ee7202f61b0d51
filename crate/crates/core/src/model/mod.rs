//! Transformer encoder-decoder over byte tokens.
//!
//! Inputs are either fixed one-hot vectors (no embedding parameters; output
//! logits are the first `vocab` components of the final decoder state) or a
//! dense table tied between input and output. Sinusoidal positions are added
//! in both modes. The encoder front-end optionally applies one of the fusion
//! schemes in [`crate::fusion`].

pub mod checkpoint;
mod config;
mod layers;
mod params;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bytes_tok::{self, ByteSequence, TokError, WordSpanMap, BOS, EOS, PAD};
use crate::fusion::NcfParams;
use crate::tensor::{AttnMask, Float, Graph, Tensor, TensorError, Var};

pub use config::{EmbeddingMode, FusionKind, ModelConfig};
pub use layers::{
    sinusoidal_positions, AttentionSite, Ctx, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
pub(crate) use params::xavier_uniform as params_xavier;
pub use params::{Decay, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tok(#[from] TokError),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Padded source side of a batch: each row is `BOS bytes EOS PAD*`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    /// Word spans (specials included) over the non-PAD prefix of each row.
    pub spans: Vec<WordSpanMap>,
}

impl SourceBatch {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let seqs: Vec<ByteSequence> = texts.iter().map(|t| bytes_tok::tokenize(t.as_ref(), true)).collect();
        let spans = texts
            .iter()
            .map(|t| bytes_tok::word_spans(t.as_ref()).with_specials())
            .collect();
        Self::assemble(&seqs, spans)
    }

    /// Build from token sequences; spans are recovered from the bytes, so
    /// the content must be valid UTF-8.
    pub fn from_sequences(seqs: &[ByteSequence]) -> Result<Self, ModelError> {
        let spans = seqs
            .iter()
            .map(|s| bytes_tok::spans_for_ids(s.ids()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::assemble(seqs, spans))
    }

    fn assemble(seqs: &[ByteSequence], spans: Vec<WordSpanMap>) -> Self {
        let len = seqs.iter().map(ByteSequence::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s.ids());
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Self {
            ids,
            batch: seqs.len(),
            len,
            spans,
        }
    }

    pub fn keep_rows(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD).collect()
    }

    /// Full attention among non-PAD positions.
    pub fn pad_mask(&self) -> AttnMask {
        let n = self.len;
        AttnMask::from_fn(self.batch, n, n, |b, _, j| self.ids[b * n + j] != PAD)
    }
}

/// Teacher-forcing target side: decoder input `BOS bytes` and output
/// `bytes EOS`, both PAD-filled to `len`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TargetBatch {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let len = texts.iter().map(|t| t.as_ref().len() + 1).max().unwrap_or(0);
        let mut input = Vec::with_capacity(texts.len() * len);
        let mut output = Vec::with_capacity(texts.len() * len);
        for t in texts {
            let bytes = t.as_ref().bytes().map(u32::from);
            let pad = len - (t.as_ref().len() + 1);
            input.push(BOS);
            input.extend(bytes.clone());
            output.extend(bytes);
            output.push(EOS);
            input.extend(std::iter::repeat_n(PAD, pad));
            output.extend(std::iter::repeat_n(PAD, pad));
        }
        Self {
            input,
            output,
            batch: texts.len(),
            len,
        }
    }
}

/// Byte-level transformer encoder-decoder.
#[derive(Debug, Clone)]
pub struct Seq2Seq<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    embed: Option<ParamId>,
    pub(crate) encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    pub(crate) ncf: Option<NcfParams>,
}

impl<T: Float> Seq2Seq<T> {
    /// Build a freshly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let eps = config.layer_norm_eps;

        let embed = (config.embedding == EmbeddingMode::Dense).then(|| {
            store.add(
                "embed.table",
                params::normal(&mut rng, &[config.vocab, d], (d as f64).powf(-0.5)),
                Decay::Apply,
            )
        });
        let encoder = (0..config.enc_layers)
            .map(|i| {
                let name = format!("encoder.layers.{i}");
                EncoderLayer {
                    index: i,
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d, eps),
                    attn: MultiHeadAttention::new(&mut store, &mut rng, &format!("{name}.self_attn"), d, config.heads),
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d, eps),
                    ffn: FeedForward::new(&mut store, &mut rng, &format!("{name}.ffn"), d, config.ffn_dim),
                    dropout: config.dropout,
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "encoder.norm", d, eps);
        let ncf = (config.fusion == FusionKind::Ncf).then(|| NcfParams::register(&mut store, &mut rng, d));
        let decoder = (0..config.dec_layers)
            .map(|i| {
                let name = format!("decoder.layers.{i}");
                DecoderLayer {
                    index: i,
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d, eps),
                    self_attn: MultiHeadAttention::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.self_attn"),
                        d,
                        config.heads,
                    ),
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d, eps),
                    cross_attn: MultiHeadAttention::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.cross_attn"),
                        d,
                        config.heads,
                    ),
                    norm3: LayerNorm::new(&mut store, &format!("{name}.norm3"), d, eps),
                    ffn: FeedForward::new(&mut store, &mut rng, &format!("{name}.ffn"), d, config.ffn_dim),
                    dropout: config.dropout,
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut store, "decoder.norm", d, eps);
        Ok(Self {
            config,
            params: store,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            ncf,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Trainable scalar count.
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Input representation of `batch` rows of `len` ids: one-hot or
    /// `sqrt(d)`-scaled dense lookup, plus sinusoidal positions, then
    /// dropout.
    pub fn embed_ids(&self, ctx: &mut Ctx<'_, T>, ids: &[u32], batch: usize, len: usize) -> Result<Var, ModelError> {
        if ids.len() != batch * len {
            return Err(ModelError::Input(format!(
                "{} ids for batch {batch} × len {len}",
                ids.len()
            )));
        }
        if let Some(pos) = ids.iter().position(|&id| id as usize >= self.config.vocab) {
            return Err(ModelError::Input(format!(
                "token id {} at position {pos} outside vocabulary of {}",
                ids[pos], self.config.vocab
            )));
        }
        let d = self.config.d_model;
        let pe = sinusoidal_positions::<T>(len, d);
        let mut pos_table = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            pos_table.extend_from_slice(pe.data());
        }
        let x = match self.embed {
            None => {
                for (row, &id) in pos_table.chunks_mut(d).zip(ids) {
                    row[id as usize] += T::one();
                }
                ctx.g.constant(Tensor::new(&[batch * len, d], pos_table)?)
            }
            Some(table) => {
                let e = ctx.g.embedding(ctx.p(table), ids)?;
                let e = ctx.g.scale(e, T::of((d as f64).sqrt()))?;
                let pos = ctx.g.constant(Tensor::new(&[batch * len, d], pos_table)?);
                ctx.g.add(e, pos)?
            }
        };
        Ok(ctx.dropout(x, self.config.dropout)?)
    }

    /// Embed a single sequence in evaluation mode.
    pub fn embed(&self, seq: &[u32]) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &self.params);
        let x = self.embed_ids(&mut ctx, seq, 1, seq.len())?;
        Ok(g.value(x).clone())
    }

    /// Apply encoder layers `layers` to `x` under `mask`.
    pub fn encode(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        layers: Range<usize>,
        mask: &AttnMask,
    ) -> Result<Var, ModelError> {
        if layers.end > self.encoder.len() {
            return Err(ModelError::Input(format!(
                "encoder layers {layers:?} exceed the {} available",
                self.encoder.len()
            )));
        }
        let rows = ctx.g.shape(x)[0];
        if rows != mask.batch() * mask.q_len() || mask.q_len() != mask.k_len() {
            return Err(ModelError::Input(format!(
                "mask {}×{}×{} does not fit {rows} input rows",
                mask.batch(),
                mask.q_len(),
                mask.k_len()
            )));
        }
        let mut h = x;
        for layer in &self.encoder[layers] {
            h = layer.forward(ctx, h, mask)?;
        }
        Ok(h)
    }

    /// Source tokens to decoder memory: embedding, the configured encoder
    /// front-end, remaining layers and the final norm.
    pub fn encode_source(&self, ctx: &mut Ctx<'_, T>, src: &SourceBatch) -> Result<Var, ModelError> {
        if src.batch == 0 || src.len == 0 {
            return Err(ModelError::Input("empty source batch".into()));
        }
        let x = self.embed_ids(ctx, &src.ids, src.batch, src.len)?;
        let h = match self.config.fusion {
            FusionKind::None => self.encode(ctx, x, 0..self.encoder.len(), &src.pad_mask())?,
            FusionKind::Ncf => self.ncf_encode(ctx, x, src)?,
            FusionKind::Wsf => self.wsf_encode(ctx, x, src)?,
        };
        Ok(self.enc_norm.forward(ctx, h)?)
    }

    /// Decoder logits `[(batch·len)×vocab]` for teacher-forced inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        ctx: &mut Ctx<'_, T>,
        memory: Var,
        memory_ids: &[u32],
        memory_len: usize,
        tgt_input: &[u32],
        batch: usize,
        len: usize,
    ) -> Result<Var, ModelError> {
        let x = self.embed_ids(ctx, tgt_input, batch, len)?;
        let self_mask = AttnMask::from_fn(batch, len, len, |b, i, j| j <= i && tgt_input[b * len + j] != PAD);
        let cross_mask = AttnMask::from_fn(batch, len, memory_len, |b, _, j| memory_ids[b * memory_len + j] != PAD);
        let mut h = x;
        for layer in &self.decoder {
            h = layer.forward(ctx, h, memory, &self_mask, &cross_mask)?;
        }
        let h = self.dec_norm.forward(ctx, h)?;
        let vocab = self.config.vocab;
        Ok(match self.embed {
            None => ctx.g.slice_cols(h, 0, vocab)?,
            Some(table) => ctx.g.matmul_bt(h, ctx.p(table))?,
        })
    }

    /// Mean label-smoothed cross-entropy over non-PAD target positions.
    pub fn loss(
        &self,
        ctx: &mut Ctx<'_, T>,
        src: &SourceBatch,
        tgt: &TargetBatch,
        smoothing: f64,
    ) -> Result<Var, ModelError> {
        if src.batch != tgt.batch {
            return Err(ModelError::Input(format!(
                "source batch {} vs target batch {}",
                src.batch, tgt.batch
            )));
        }
        let memory = self.encode_source(ctx, src)?;
        let logits = self.decode(ctx, memory, &src.ids, src.len, &tgt.input, tgt.batch, tgt.len)?;
        Ok(ctx
            .g
            .smoothed_cross_entropy(logits, &tgt.output, Some(PAD), smoothing)?)
    }

    /// Encoder memory for a source batch, in evaluation mode.
    pub fn memory(&self, src: &SourceBatch) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &self.params);
        let m = self.encode_source(&mut ctx, src)?;
        Ok(g.value(m).clone())
    }

    /// Next-token log-probabilities for several equal-length prefixes that
    /// all attend to the same single-sentence memory.
    pub fn next_log_probs(
        &self,
        memory: &Tensor<T>,
        memory_ids: &[u32],
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let batch = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len);
        if len == 0 || prefixes.iter().any(|p| p.len() != len || p[0] != BOS) {
            return Err(ModelError::Input(
                "prefixes must be non-empty, equal length and start with BOS".into(),
            ));
        }
        let mem_len = memory_ids.len();
        if memory.rows() != mem_len {
            return Err(ModelError::Input(format!(
                "memory has {} rows for {mem_len} source ids",
                memory.rows()
            )));
        }
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &self.params);
        let mut mem_rows = Vec::with_capacity(batch * memory.numel());
        let mut ids = Vec::with_capacity(batch * mem_len);
        for _ in 0..batch {
            mem_rows.extend_from_slice(memory.data());
            ids.extend_from_slice(memory_ids);
        }
        let mem = ctx
            .g
            .constant(Tensor::new(&[batch * mem_len, memory.cols()], mem_rows)?);
        let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let logits = self.decode(&mut ctx, mem, &ids, mem_len, &flat, batch, len)?;
        let lv = g.value(logits);
        let vocab = self.config.vocab;
        Ok((0..batch)
            .map(|b| {
                let row = lv.row(b * len + len - 1);
                let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
                row[..vocab].iter().map(|v| v.as_f64() - lse).collect()
            })
            .collect())
    }

    /// `P(y_t | y_<t, x)` for one prefix.
    pub fn decode_step(&self, prefix: &[u32], memory: &Tensor<T>, memory_ids: &[u32]) -> Result<Vec<f64>, ModelError> {
        let lp = self.next_log_probs(memory, memory_ids, &[prefix.to_vec()])?;
        Ok(lp[0].iter().map(|v| v.exp()).collect())
    }

    /// Same weights in another precision.
    pub fn cast<U: Float>(&self) -> Seq2Seq<U> {
        let mut params = ParamStore::new();
        for id in self.params.ids() {
            params.add(self.params.name(id), self.params.get(id).cast(), self.params.decay(id));
        }
        Seq2Seq {
            config: self.config.clone(),
            params,
            embed: self.embed,
            encoder: self.encoder.clone(),
            enc_norm: self.enc_norm.clone(),
            decoder: self.decoder.clone(),
            dec_norm: self.dec_norm.clone(),
            ncf: self.ncf.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
