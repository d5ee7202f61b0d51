//! Transformer building blocks (pre-norm arrangement).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{AttnMask, Float, Graph, Tensor, TensorError, Var};

use super::params::{xavier_uniform, Decay, ParamId, ParamStore};

type Result<T> = std::result::Result<T, TensorError>;

/// Which attention sub-layer produced a recorded probability tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSite {
    Encoder(usize),
    DecoderSelf(usize),
    DecoderCross(usize),
}

/// Per-forward-pass state: the graph, bound parameter variables, the
/// dropout generator (absent in evaluation) and optional attention records.
pub struct Ctx<'g, T> {
    pub g: &'g mut Graph<T>,
    params: Vec<Var>,
    rng: Option<ChaCha8Rng>,
    record: bool,
    attention: Vec<(AttentionSite, Var)>,
}

impl<'g, T: Float> Ctx<'g, T> {
    /// Bind every parameter of `store` into `g`.
    pub fn new(g: &'g mut Graph<T>, store: &ParamStore<T>) -> Self {
        let params = store.bind(g);
        Self::from_vars(g, params)
    }

    /// Use caller-provided variables for the parameters, in store order.
    pub fn from_vars(g: &'g mut Graph<T>, params: Vec<Var>) -> Self {
        Self {
            g,
            params,
            rng: None,
            record: false,
            attention: Vec::new(),
        }
    }

    /// Enable dropout driven by `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn record_attention(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn attention_records(&self) -> &[(AttentionSite, Var)] {
        &self.attention
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if rate > 0.0 => self.g.dropout(x, rate, rng),
            _ => Ok(x),
        }
    }

    fn record(&mut self, site: AttentionSite, v: Var) {
        if self.record {
            self.attention.push((site, v));
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
            Decay::Apply,
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]), Decay::Apply);
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.g.matmul(x, ctx.p(self.weight))?;
        ctx.g.add_bias(y, ctx.p(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, eps: f64) -> Self {
        let gain = store.add(&format!("{name}.gain"), Tensor::full(&[d], T::one()), Decay::Exempt);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d]), Decay::Exempt);
        Self { gain, bias, eps }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.g.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (which holds
    /// the probabilities).
    pub fn forward<T: Float>(
        &self,
        ctx: &mut Ctx<'_, T>,
        query: Var,
        memory: Var,
        mask: &AttnMask,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, memory)?;
        let v = self.v.forward(ctx, memory)?;
        let attn = ctx.g.attention(q, k, v, self.heads, mask)?;
        Ok((self.out.forward(ctx, attn)?, attn))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, d: usize, ffn: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, ffn),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), ffn, d),
        }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.relu(h)?;
        self.fc2.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub index: usize,
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var, mask: &AttnMask) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let (a, probs) = self.attn.forward(ctx, h, h, mask)?;
        ctx.record(AttentionSite::Encoder(self.index), probs);
        let a = ctx.dropout(a, self.dropout)?;
        let x = ctx.g.add(x, a)?;
        let h = self.norm2.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, h)?;
        let f = ctx.dropout(f, self.dropout)?;
        ctx.g.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub index: usize,
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn forward<T: Float>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        memory: Var,
        self_mask: &AttnMask,
        cross_mask: &AttnMask,
    ) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let (a, probs) = self.self_attn.forward(ctx, h, h, self_mask)?;
        ctx.record(AttentionSite::DecoderSelf(self.index), probs);
        let a = ctx.dropout(a, self.dropout)?;
        let x = ctx.g.add(x, a)?;
        let h = self.norm2.forward(ctx, x)?;
        let (c, probs) = self.cross_attn.forward(ctx, h, memory, cross_mask)?;
        ctx.record(AttentionSite::DecoderCross(self.index), probs);
        let c = ctx.dropout(c, self.dropout)?;
        let x = ctx.g.add(x, c)?;
        let h = self.norm3.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, h)?;
        let f = ctx.dropout(f, self.dropout)?;
        ctx.g.add(x, f)
    }
}

/// Sinusoidal position table `[len × d]`, interleaving sin (even columns)
/// and cos (odd columns).
pub fn sinusoidal_positions<T: Float>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[len, d], data).expect("shape matches")
}
