use std::sync::Arc;

use rand::Rng;

use super::{gemm, Float, MatMut, MatRef, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Receives the upstream gradient and every earlier node, returns gradient
/// contributions keyed by input node index.
type BackwardFn<T> = Box<dyn Fn(&[T], &[Node<T>]) -> Vec<(usize, Vec<T>)>>;

pub(crate) struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    aux: Option<Arc<Vec<T>>>,
}

fn val<T: Float>(nodes: &[Node<T>], i: usize) -> &[T] {
    nodes[i].value.data()
}

fn needs<T>(nodes: &[Node<T>], i: usize) -> bool {
    nodes[i].requires_grad
}

/// Allowed/blocked pattern for batched attention: `batch` independent
/// `q_len × k_len` boolean matrices, `true` meaning the query may attend to
/// the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    batch: usize,
    q_len: usize,
    k_len: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, q_len: usize, k_len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * q_len * k_len {
            return Err(TensorError::invalid(
                "attn_mask",
                format!(
                    "{} entries for batch={batch} q_len={q_len} k_len={k_len}",
                    allowed.len()
                ),
            ));
        }
        Ok(Self {
            batch,
            q_len,
            k_len,
            allowed,
        })
    }

    pub fn from_fn(batch: usize, q_len: usize, k_len: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(batch * q_len * k_len);
        for b in 0..batch {
            for i in 0..q_len {
                for j in 0..k_len {
                    allowed.push(f(b, i, j));
                }
            }
        }
        Self {
            batch,
            q_len,
            k_len,
            allowed,
        }
    }

    pub fn full(batch: usize, q_len: usize, k_len: usize) -> Self {
        Self::from_fn(batch, q_len, k_len, |_, _, _| true)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn is_allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.q_len + i) * self.k_len + j]
    }

    /// Elementwise AND of two masks of equal geometry.
    pub fn and(&self, other: &AttnMask) -> Result<AttnMask> {
        if (self.batch, self.q_len, self.k_len) != (other.batch, other.q_len, other.k_len) {
            return Err(TensorError::mismatch(
                "attn_mask_and",
                &[self.batch, self.q_len, self.k_len],
                &[other.batch, other.q_len, other.k_len],
            ));
        }
        let allowed = self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect();
        Ok(AttnMask { allowed, ..*self })
    }
}

/// Records operations for reverse-mode differentiation. A graph is built
/// per forward pass and dropped afterwards.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Attention probabilities `[batch, heads, q_len, k_len]` recorded by an
    /// [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].aux.as_deref().map(|v| v.as_slice())
    }

    fn push<F>(&mut self, value: Tensor<T>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&[T], &[Node<T>]) -> Vec<(usize, Vec<T>)> + 'static,
    {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagate from a single-element node. Gradients are retained on
    /// leaves only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("target must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = node.grad.take() else {
                continue;
            };
            for (j, contribution) in backward(&grad, before) {
                let target = &mut before[j];
                if !target.requires_grad {
                    continue;
                }
                match target.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                    None => target.grad = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            T::zero(),
            MatMut::new(&mut out, m, n),
        );
        let (ai, bi) = (a.0, b.0);
        Ok(self.push(Tensor::new(&[m, n], out)?, &[a, b], move |g, nodes| {
            let mut res = Vec::with_capacity(2);
            if needs(nodes, ai) {
                let mut da = vec![T::zero(); m * k];
                gemm(
                    T::one(),
                    MatRef::new(g, m, n),
                    MatRef::new(val(nodes, bi), k, n).t(),
                    T::zero(),
                    MatMut::new(&mut da, m, k),
                );
                res.push((ai, da));
            }
            if needs(nodes, bi) {
                let mut db = vec![T::zero(); k * n];
                gemm(
                    T::one(),
                    MatRef::new(val(nodes, ai), m, k).t(),
                    MatRef::new(g, m, n),
                    T::zero(),
                    MatMut::new(&mut db, k, n),
                );
                res.push((bi, db));
            }
            res
        }))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_bt", a)?;
        let (n, k2) = self.dims2("matmul_bt", b)?;
        if k != k2 {
            return Err(TensorError::mismatch("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), n, k).t(),
            T::zero(),
            MatMut::new(&mut out, m, n),
        );
        let (ai, bi) = (a.0, b.0);
        Ok(self.push(Tensor::new(&[m, n], out)?, &[a, b], move |g, nodes| {
            let mut res = Vec::with_capacity(2);
            if needs(nodes, ai) {
                let mut da = vec![T::zero(); m * k];
                gemm(
                    T::one(),
                    MatRef::new(g, m, n),
                    MatRef::new(val(nodes, bi), n, k),
                    T::zero(),
                    MatMut::new(&mut da, m, k),
                );
                res.push((ai, da));
            }
            if needs(nodes, bi) {
                let mut db = vec![T::zero(); n * k];
                gemm(
                    T::one(),
                    MatRef::new(g, m, n).t(),
                    MatRef::new(val(nodes, ai), m, k),
                    T::zero(),
                    MatMut::new(&mut db, n, k),
                );
                res.push((bi, db));
            }
            res
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let (ai, bi) = (a.0, b.0);
        Ok(self.push(Tensor::new(&shape, out)?, &[a, b], move |g, _| {
            vec![(ai, g.to_vec()), (bi, g.to_vec())]
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let (ai, bi) = (a.0, b.0);
        Ok(self.push(Tensor::new(&shape, out)?, &[a, b], move |g, nodes| {
            let da = g.iter().zip(val(nodes, bi)).map(|(g, y)| *g * *y).collect();
            let db = g.iter().zip(val(nodes, ai)).map(|(g, x)| *g * *x).collect();
            vec![(ai, da), (bi, db)]
        }))
    }

    /// Add a length-`n` bias to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", a)?;
        if self.shape(bias) != [n] {
            return Err(TensorError::mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| *x + *b))
            .collect();
        let (ai, bi) = (a.0, bias.0);
        Ok(self.push(Tensor::new(&[m, n], out)?, &[a, bias], move |g, _| {
            let mut db = vec![T::zero(); n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
            }
            vec![(ai, g.to_vec()), (bi, db)]
        }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|x| *x * s).collect();
        let shape = self.shape(a).to_vec();
        let ai = a.0;
        Ok(self.push(Tensor::new(&shape, out)?, &[a], move |g, _| {
            vec![(ai, g.iter().map(|v| *v * s).collect())]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        let ai = a.0;
        Ok(self.push(Tensor::new(&shape, out)?, &[a], move |g, nodes| {
            let d = g
                .iter()
                .zip(val(nodes, ai))
                .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                .collect();
            vec![(ai, d)]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let y = Arc::new(out.clone());
        let ai = a.0;
        Ok(self.push(Tensor::new(&shape, out)?, &[a], move |g, _| {
            let mut d = vec![T::zero(); g.len()];
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let dot: T = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum();
                for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *dv = *yv * (*gv - dot);
                }
            }
            vec![(ai, d)]
        }))
    }

    /// Row-wise layer normalisation with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(TensorError::mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gs[c] + bs[c];
            }
        }
        let (xi, gi, bi) = (x.0, gain.0, bias.0);
        Ok(
            self.push(Tensor::new(&[m, n], out)?, &[x, gain, bias], move |g, nodes| {
                let gs = val(nodes, gi);
                let mut dx = vec![T::zero(); m * n];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..n {
                        let dh = grow[c] * gs[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[c];
                        dg[c] += grow[c] * hrow[c];
                        db[c] += grow[c];
                    }
                    mean_dh = mean_dh / nf;
                    mean_dh_h = mean_dh_h / nf;
                    for c in 0..n {
                        let dh = grow[c] * gs[c];
                        dx[r * n + c] = rstd[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                    }
                }
                vec![(xi, dx), (gi, dg), (bi, db)]
            }),
        )
    }

    /// Inverted dropout. A rate of zero returns the input unchanged.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid("dropout", format!("rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep_scale })
            .collect();
        let out: Vec<T> = self.value(a).data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let shape = self.shape(a).to_vec();
        let ai = a.0;
        Ok(self.push(Tensor::new(&shape, out)?, &[a], move |g, _| {
            vec![(ai, g.iter().zip(&mask).map(|(g, m)| *g * *m).collect())]
        }))
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_rows", "no inputs"))?;
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(TensorError::mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows.push((p.0, r));
            out.extend_from_slice(self.value(p).data());
        }
        let total: usize = rows.iter().map(|(_, r)| r).sum();
        Ok(self.push(Tensor::new(&[total, n], out)?, parts, move |g, _| {
            let mut offset = 0;
            rows.iter()
                .map(|&(i, r)| {
                    let part = g[offset * n..(offset + r) * n].to_vec();
                    offset += r;
                    (i, part)
                })
                .collect()
        }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if start > end || end > m {
            return Err(TensorError::invalid(
                "slice_rows",
                format!("{start}..{end} of {m} rows"),
            ));
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        let ai = a.0;
        Ok(self.push(Tensor::new(&[end - start, n], out)?, &[a], move |g, _| {
            let mut d = vec![T::zero(); m * n];
            d[start * n..end * n].copy_from_slice(g);
            vec![(ai, d)]
        }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start > end || end > n {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("{start}..{end} of {n} cols"),
            ));
        }
        let w = end - start;
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let ai = a.0;
        Ok(self.push(Tensor::new(&[m, w], out)?, &[a], move |g, _| {
            let mut d = vec![T::zero(); m * n];
            for (r, grow) in g.chunks(w.max(1)).enumerate().take(m) {
                d[r * n + start..r * n + end].copy_from_slice(&grow[..w]);
            }
            vec![(ai, d)]
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        let ai = a.0;
        Ok(self.push(Tensor::new(&[n, m], out)?, &[a], move |g, _| {
            let mut d = vec![T::zero(); m * n];
            for r in 0..m {
                for c in 0..n {
                    d[r * n + c] = g[c * m + r];
                }
            }
            vec![(ai, d)]
        }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let numel = self.value(a).numel();
        let ai = a.0;
        Ok(self.push(Tensor::scalar(s), &[a], move |g, _| vec![(ai, vec![g[0]; numel])]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let numel = self.value(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(numel as f64))
    }

    /// Zero the rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2("mask_rows", a)?;
        if keep.len() != m {
            return Err(TensorError::mismatch("mask_rows", self.shape(a), &[keep.len()]));
        }
        let mut out = self.value(a).data().to_vec();
        for (r, k) in keep.iter().enumerate() {
            if !k {
                out[r * n..(r + 1) * n].fill(T::zero());
            }
        }
        let keep = keep.to_vec();
        let ai = a.0;
        Ok(self.push(Tensor::new(&[m, n], out)?, &[a], move |g, _| {
            let mut d = g.to_vec();
            for (r, k) in keep.iter().enumerate() {
                if !k {
                    d[r * n..(r + 1) * n].fill(T::zero());
                }
            }
            vec![(ai, d)]
        }))
    }

    /// `Σ_k weights[k] · parts[k]` with a learnable weight vector.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: Var) -> Result<Var> {
        if self.shape(weights) != [parts.len()] {
            return Err(TensorError::mismatch(
                "weighted_sum",
                self.shape(weights),
                &[parts.len()],
            ));
        }
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("weighted_sum", "no inputs"))?;
        for &p in parts {
            self.same_shape("weighted_sum", first, p)?;
        }
        let shape = self.shape(first).to_vec();
        let w = self.value(weights).data().to_vec();
        let mut out = vec![T::zero(); self.value(first).numel()];
        for (&p, &wk) in parts.iter().zip(&w) {
            out.iter_mut()
                .zip(self.value(p).data())
                .for_each(|(o, x)| *o += wk * *x);
        }
        let part_ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let wi = weights.0;
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        Ok(self.push(Tensor::new(&shape, out)?, &inputs, move |g, nodes| {
            let wv = val(nodes, wi);
            let mut res = Vec::with_capacity(part_ids.len() + 1);
            let mut dw = vec![T::zero(); part_ids.len()];
            for (k, &pi) in part_ids.iter().enumerate() {
                dw[k] = g.iter().zip(val(nodes, pi)).map(|(g, x)| *g * *x).sum();
                if needs(nodes, pi) {
                    res.push((pi, g.iter().map(|g| *g * wv[k]).collect()));
                }
            }
            res.push((wi, dw));
            res
        }))
    }

    /// Gather rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(TensorError::invalid(
                "embedding",
                format!("id {bad} outside vocabulary of {vocab}"),
            ));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let ids = ids.to_vec();
        let ti = table.0;
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, &[table], move |g, _| {
            let mut dt = vec![T::zero(); vocab * d];
            for (r, &id) in ids.iter().enumerate() {
                let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += *b);
            }
            vec![(ti, dt)]
        }))
    }

    /// Non-overlapping 1-D convolution over `batch` sequences stacked in
    /// `input[(batch·len)×d_in]`, with `kernel[width×d_in×d_out]`.
    ///
    /// `stride` must equal the kernel width. With `right_pad` each sequence
    /// is extended with zero rows to a multiple of the width; without it the
    /// length must already be a multiple. Output is
    /// `[(batch·ceil(len/width))×d_out]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        right_pad: bool,
        batch: usize,
    ) -> Result<Var> {
        let (rows, d_in) = self.dims2("conv1d", input)?;
        let (width, k_in, d_out) = match self.shape(kernel) {
            [w, i, o] => (*w, *i, *o),
            s => {
                return Err(TensorError::invalid(
                    "conv1d",
                    format!("kernel must be [width, d_in, d_out], got {s:?}"),
                ))
            }
        };
        if k_in != d_in {
            return Err(TensorError::mismatch("conv1d", self.shape(input), self.shape(kernel)));
        }
        if width < 1 {
            return Err(TensorError::invalid("conv1d", "kernel width must be at least 1"));
        }
        if stride != width {
            return Err(TensorError::invalid(
                "conv1d",
                format!("stride {stride} must equal kernel width {width}"),
            ));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(TensorError::invalid(
                "conv1d",
                format!("{rows} rows do not split into {batch} sequences"),
            ));
        }
        let len = rows / batch;
        let out_len = if right_pad {
            len.div_ceil(width)
        } else {
            if !len.is_multiple_of(width) || width > len {
                return Err(TensorError::invalid(
                    "conv1d",
                    format!("length {len} is not a positive multiple of width {width}"),
                ));
            }
            len / width
        };
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(TensorError::mismatch("conv1d", self.shape(kernel), self.shape(b)));
            }
        }
        // Unfold each window of `width` rows into one row of the patch matrix.
        let patch_w = width * d_in;
        let src = self.value(input).data();
        let mut patches = vec![T::zero(); batch * out_len * patch_w];
        for b in 0..batch {
            for k in 0..out_len {
                for j in 0..width {
                    let pos = k * width + j;
                    if pos < len {
                        let from = &src[(b * len + pos) * d_in..(b * len + pos + 1) * d_in];
                        let at = (b * out_len + k) * patch_w + j * d_in;
                        patches[at..at + d_in].copy_from_slice(from);
                    }
                }
            }
        }
        let m = batch * out_len;
        let mut out = vec![T::zero(); m * d_out];
        gemm(
            T::one(),
            MatRef::new(&patches, m, patch_w),
            MatRef::new(self.value(kernel).data(), patch_w, d_out),
            T::zero(),
            MatMut::new(&mut out, m, d_out),
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += *b);
            }
        }
        let (ii, ki, bi) = (input.0, kernel.0, bias.map(|b| b.0));
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(Tensor::new(&[m, d_out], out)?, &inputs, move |g, nodes| {
            let mut res = Vec::with_capacity(3);
            if needs(nodes, ki) {
                let mut dk = vec![T::zero(); patch_w * d_out];
                gemm(
                    T::one(),
                    MatRef::new(&patches, m, patch_w).t(),
                    MatRef::new(g, m, d_out),
                    T::zero(),
                    MatMut::new(&mut dk, patch_w, d_out),
                );
                res.push((ki, dk));
            }
            if needs(nodes, ii) {
                let mut dp = vec![T::zero(); m * patch_w];
                gemm(
                    T::one(),
                    MatRef::new(g, m, d_out),
                    MatRef::new(val(nodes, ki), patch_w, d_out).t(),
                    T::zero(),
                    MatMut::new(&mut dp, m, patch_w),
                );
                let mut di = vec![T::zero(); batch * len * d_in];
                for b in 0..batch {
                    for k in 0..out_len {
                        for j in 0..width {
                            let pos = k * width + j;
                            if pos < len {
                                let at = (b * out_len + k) * patch_w + j * d_in;
                                di[(b * len + pos) * d_in..(b * len + pos + 1) * d_in]
                                    .copy_from_slice(&dp[at..at + d_in]);
                            }
                        }
                    }
                }
                res.push((ii, di));
            }
            if let Some(bi) = bi {
                let mut db = vec![T::zero(); d_out];
                for row in g.chunks(d_out) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                }
                res.push((bi, db));
            }
            res
        }))
    }

    /// Repeat every row of each of `batch` sequences `factor` times in place,
    /// then truncate each sequence to `out_len` rows.
    pub fn repeat_rows(&mut self, a: Var, factor: usize, out_len: usize, batch: usize) -> Result<Var> {
        let (rows, d) = self.dims2("repeat_rows", a)?;
        if factor == 0 || batch == 0 || rows % batch != 0 {
            return Err(TensorError::invalid(
                "repeat_rows",
                format!("factor {factor}, batch {batch}, rows {rows}"),
            ));
        }
        let in_len = rows / batch;
        if in_len * factor < out_len {
            return Err(TensorError::invalid(
                "repeat_rows",
                format!("{in_len} rows × {factor} cannot cover {out_len}"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(batch * out_len * d);
        for b in 0..batch {
            for i in 0..out_len {
                let r = b * in_len + i / factor;
                out.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let ai = a.0;
        Ok(self.push(Tensor::new(&[batch * out_len, d], out)?, &[a], move |g, _| {
            let mut da = vec![T::zero(); rows * d];
            for b in 0..batch {
                for i in 0..out_len {
                    let r = b * in_len + i / factor;
                    let gr = &g[(b * out_len + i) * d..(b * out_len + i + 1) * d];
                    da[r * d..(r + 1) * d].iter_mut().zip(gr).for_each(|(x, y)| *x += *y);
                }
            }
            vec![(ai, da)]
        }))
    }

    /// Scaled dot-product attention over `heads` heads for a batch of
    /// sequences: `q[(B·Nq)×d]`, `k`/`v[(B·Nk)×d]`, geometry from `mask`.
    ///
    /// Blocked logits are treated as −∞; a query row with no allowed key
    /// produces zeros. The probabilities are kept on the node, see
    /// [`Graph::attention_probs`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (bq, d) = self.dims2("attention", q)?;
        let (bk, dk_) = self.dims2("attention", k)?;
        self.same_shape("attention", k, v)?;
        let (batch, nq, nk) = (mask.batch, mask.q_len, mask.k_len);
        if bq != batch * nq || bk != batch * nk || dk_ != d {
            return Err(TensorError::invalid(
                "attention",
                format!(
                    "q {:?}, k {:?} incompatible with mask batch={batch} q_len={nq} k_len={nk}",
                    self.shape(q),
                    self.shape(k)
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::invalid(
                "attention",
                format!("d={d} not divisible by {heads} heads"),
            ));
        }
        let hd = d / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let block = nq * nk;
        let mut probs = vec![T::zero(); batch * heads * block];
        let mut out = vec![T::zero(); batch * nq * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * block..(b * heads + h + 1) * block];
                gemm(
                    scale,
                    MatRef::strided(qv, b * nq * d + h * hd, nq, hd, d, 1),
                    MatRef::strided(kv, b * nk * d + h * hd, nk, hd, d, 1).t(),
                    T::zero(),
                    MatMut::new(p, nq, nk),
                );
                for i in 0..nq {
                    let row = &mut p[i * nk..(i + 1) * nk];
                    let allowed = &mask.allowed[(b * nq + i) * nk..(b * nq + i + 1) * nk];
                    masked_softmax_in_place(row, allowed);
                }
                gemm(
                    T::one(),
                    MatRef::new(p, nq, nk),
                    MatRef::strided(vv, b * nk * d + h * hd, nk, hd, d, 1),
                    T::zero(),
                    MatMut::strided(&mut out, b * nq * d + h * hd, nq, hd, d, 1),
                );
            }
        }
        let probs = Arc::new(probs);
        let saved = Arc::clone(&probs);
        let (qi, ki, vi) = (q.0, k.0, v.0);
        let var = self.push(Tensor::new(&[bq, d], out)?, &[q, k, v], move |g, nodes| {
            let (qv, kv, vv) = (val(nodes, qi), val(nodes, ki), val(nodes, vi));
            let mut dq = vec![T::zero(); bq * d];
            let mut dk = vec![T::zero(); bk * d];
            let mut dv = vec![T::zero(); bk * d];
            let mut dp = vec![T::zero(); block];
            for b in 0..batch {
                for h in 0..heads {
                    let p = &saved[(b * heads + h) * block..(b * heads + h + 1) * block];
                    let go = MatRef::strided(g, b * nq * d + h * hd, nq, hd, d, 1);
                    gemm(
                        T::one(),
                        go,
                        MatRef::strided(vv, b * nk * d + h * hd, nk, hd, d, 1).t(),
                        T::zero(),
                        MatMut::new(&mut dp, nq, nk),
                    );
                    for i in 0..nq {
                        let prow = &p[i * nk..(i + 1) * nk];
                        let drow = &mut dp[i * nk..(i + 1) * nk];
                        let dot: T = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                        for (dv, pv) in drow.iter_mut().zip(prow) {
                            *dv = *pv * (*dv - dot);
                        }
                    }
                    gemm(
                        scale,
                        MatRef::new(&dp, nq, nk),
                        MatRef::strided(kv, b * nk * d + h * hd, nk, hd, d, 1),
                        T::zero(),
                        MatMut::strided(&mut dq, b * nq * d + h * hd, nq, hd, d, 1),
                    );
                    gemm(
                        scale,
                        MatRef::new(&dp, nq, nk).t(),
                        MatRef::strided(qv, b * nq * d + h * hd, nq, hd, d, 1),
                        T::zero(),
                        MatMut::strided(&mut dk, b * nk * d + h * hd, nk, hd, d, 1),
                    );
                    gemm(
                        T::one(),
                        MatRef::new(p, nq, nk).t(),
                        go,
                        T::zero(),
                        MatMut::strided(&mut dv, b * nk * d + h * hd, nk, hd, d, 1),
                    );
                }
            }
            vec![(qi, dq), (ki, dk), (vi, dv)]
        });
        self.nodes[var.0].aux = Some(probs);
        Ok(var)
    }

    /// Label-smoothed cross-entropy averaged over non-ignored rows.
    ///
    /// Per row the target distribution is `(1-eps)·onehot + eps/V`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: Option<u32>,
        eps: f64,
    ) -> Result<Var> {
        let (m, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(TensorError::mismatch(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let counted: Vec<bool> = targets.iter().map(|&t| Some(t) != ignore).collect();
        if let Some((_, &t)) = targets
            .iter()
            .enumerate()
            .find(|(i, &t)| counted[*i] && t as usize >= vocab)
        {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("target {t} outside vocabulary of {vocab}"),
            ));
        }
        let count = counted.iter().filter(|&&c| c).count();
        let lv = self.value(logits).data();
        let on = T::of(1.0 - eps);
        let off = T::of(eps / vocab as f64);
        let mut probs = vec![T::zero(); m * vocab];
        let mut total = T::zero();
        for r in 0..m {
            if !counted[r] {
                continue;
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|x| (*x - mx).exp()).sum::<T>().ln();
            let mut row_loss = T::zero();
            for (c, x) in row.iter().enumerate() {
                let logp = *x - lse;
                probs[r * vocab + c] = logp.exp();
                row_loss -= off * logp;
            }
            row_loss -= on * (row[targets[r] as usize] - lse);
            total += row_loss;
        }
        let denom = T::of(count.max(1) as f64);
        let loss = if count == 0 { T::zero() } else { total / denom };
        let targets = targets.to_vec();
        let li = logits.0;
        Ok(self.push(Tensor::scalar(loss), &[logits], move |g, _| {
            let mut d = vec![T::zero(); m * vocab];
            let s = g[0] / denom;
            for r in 0..m {
                if !counted[r] {
                    continue;
                }
                for c in 0..vocab {
                    d[r * vocab + c] = s * (probs[r * vocab + c] - off);
                }
                d[r * vocab + targets[r] as usize] -= s * on;
            }
            vec![(li, d)]
        }))
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn masked_softmax_in_place<T: Float>(row: &mut [T], allowed: &[bool]) {
    let mx = row
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .map(|(v, _)| *v)
        .fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        row.fill(T::zero());
        return;
    }
    let mut s = T::zero();
    for (v, a) in row.iter_mut().zip(allowed) {
        *v = if *a { (*v - mx).exp() } else { T::zero() };
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}
