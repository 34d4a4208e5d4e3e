//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid reverse topological order. Parameters are borrowed from a
//! [`ParamStore`], never copied; a backward pass writes into a fresh
//! [`Gradients`] buffer, which lets independent graphs over the same frozen
//! parameters run concurrently.

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, softmax_rows_into, Scalar, Tensor, View, ViewMut};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One block of an attention computation: queries `q` attend to keys `k`,
/// writing `q.len()` output rows starting at row `out`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub q: Range<usize>,
    pub k: Range<usize>,
    pub out: usize,
}

/// Layout and masking of a scaled dot-product attention call.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub heads: usize,
    pub tiles: Vec<Tile>,
    /// Query `i` of a tile may see key `j` only if `j <= i + (klen - qlen)`,
    /// i.e. queries are aligned with the last `qlen` keys.
    pub causal: bool,
    /// Per-key validity over the full key matrix.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnSpec {
    /// Every query attends to every key.
    pub fn dense(heads: usize, q_len: usize, k_len: usize) -> Self {
        AttnSpec { heads, tiles: vec![Tile { q: 0..q_len, k: 0..k_len, out: 0 }], causal: false, key_valid: None }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub fn with_key_valid(mut self, valid: Vec<bool>) -> Self {
        self.key_valid = Some(valid);
        self
    }

    /// Block-diagonal self-attention: rows in each range attend only within it.
    pub fn blocks(heads: usize, ranges: &[Range<usize>]) -> Self {
        let tiles = ranges.iter().map(|r| Tile { q: r.clone(), k: r.clone(), out: r.start }).collect();
        AttnSpec { heads, tiles, causal: false, key_valid: None }
    }

    /// The same `q_len` queries attend separately to each key block; block `j`
    /// writes output rows `[j * q_len, (j + 1) * q_len)`.
    pub fn cross_blocks(heads: usize, q_len: usize, ranges: &[Range<usize>]) -> Self {
        let tiles = ranges
            .iter()
            .enumerate()
            .map(|(j, r)| Tile { q: 0..q_len, k: r.clone(), out: j * q_len })
            .collect();
        AttnSpec { heads, tiles, causal: false, key_valid: None }
    }

    fn out_rows(&self) -> usize {
        self.tiles.iter().map(|t| t.out + t.q.len()).max().unwrap_or(0)
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax { x: Var },
    LogSoftmax { x: Var, valid: Option<Vec<bool>> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<Vec<T>> },
    Dropout { x: Var, mask: Vec<T> },
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
    dropout_rng: Option<ChaCha8Rng>,
    masked_rows: usize,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Evaluation graph: dropout disabled, gradients tracked.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            dropout_rng: None,
            masked_rows: 0,
        }
    }

    /// Training graph: dropout draws from `rng`.
    pub fn training(store: &'p ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Graph { dropout_rng: Some(rng), ..Self::new(store) }
    }

    /// Forward-only graph; nothing needed for backward is retained.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Graph { grad_enabled: false, ..Self::new(store) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    /// Number of attention query rows (per head) that had no visible key.
    pub fn masked_rows(&self) -> usize {
        self.masked_rows
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Param(id) => &self.store.get(*id).value,
            _ => node.value.as_ref().expect("non-param nodes own a value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let needs = self.store.get(id).requires_grad && self.grad_enabled;
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: needs });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn mm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bview = if trans_b { bv.view().t() } else { bv.view() };
        let (m, k, k2, n) = (av.rows(), av.cols(), if trans_b { bv.cols() } else { bv.rows() }, if trans_b { bv.rows() } else { bv.cols() });
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul{} {:?} x {:?}",
                if trans_b { "_nt" } else { "" },
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(T::one(), av.view(), bview, T::zero(), out.view_mut());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, needs))
    }

    /// `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, true)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("{op} {:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    fn check_valid(&self, x: Var, valid: &Option<Vec<bool>>) -> Result<()> {
        if let Some(v) = valid {
            if v.len() != self.value(x).cols() {
                return Err(Error::Shape(format!("column mask of {} for {:?}", v.len(), self.value(x).shape())));
            }
        }
        Ok(())
    }

    /// Row-wise softmax over the last axis; masked columns get probability 0.
    pub fn softmax(&mut self, x: Var, valid: Option<Vec<bool>>) -> Result<Var> {
        self.check_valid(x, &valid)?;
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        softmax_rows_into(xv.data(), xv.cols(), valid.as_deref(), out.data_mut());
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax { x }, needs))
    }

    /// Row-wise log-softmax; masked columns are `-inf` (log of zero).
    pub fn log_softmax(&mut self, x: Var, valid: Option<Vec<bool>>) -> Result<Var> {
        self.check_valid(x, &valid)?;
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(xv.shape());
        for (xr, or) in xv.data().chunks_exact(cols).zip(out.data_mut().chunks_exact_mut(cols)) {
            let ok = |j: usize| valid.as_ref().is_none_or(|v| v[j]);
            let m = xr.iter().enumerate().filter(|(j, _)| ok(*j)).map(|(_, &v)| v).fold(T::neg_infinity(), T::max);
            let s: T = xr.iter().enumerate().filter(|(j, _)| ok(*j)).map(|(_, &v)| (v - m).exp()).sum();
            let lse = m + s.ln();
            for (j, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
                *o = if ok(j) { v - lse } else { T::neg_infinity() };
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::LogSoftmax { x, valid }, needs))
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    /// A zero-variance row maps to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::Shape(format!("layer_norm over {d} with gamma {:?}", gv.shape())));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let rows = xv.numel() / d.max(1);
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &xv.data()[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xhat, rstd) = if needs { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs))
    }

    /// Rows of `table` at `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Index(format!("id {i} out of range for {n} rows")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let needs = self.needs(table);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, needs))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_rows(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatRows(a, b), needs))
    }

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        if range.end > xv.rows() || range.start > range.end {
            return Err(Error::Index(format!("rows {range:?} of {:?}", xv.shape())));
        }
        let d = xv.cols();
        let out = Tensor::matrix(range.len(), d, xv.data()[range.start * d..range.end * d].to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start: range.start }, needs))
    }

    /// Columnwise maximum over all rows: `[T, d] -> [d]`.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let v = self.max_pool_segments(x, &[0..rows])?;
        let d = self.value(v).cols();
        let node = &mut self.nodes[v.0];
        let t = node.value.take().expect("owned");
        node.value = Some(t.reshape(vec![d])?);
        Ok(v)
    }

    /// Columnwise maximum within each row segment: `[R, d] -> [segments, d]`.
    /// The gradient flows to the first arg-max row of each column.
    pub fn max_pool_segments(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Vec::with_capacity(segments.len() * d);
        let mut argmax = Vec::with_capacity(segments.len() * d);
        for seg in segments {
            if seg.is_empty() || seg.end > xv.rows() {
                return Err(Error::Shape(format!("pool segment {seg:?} of {} rows", xv.rows())));
            }
            for c in 0..d {
                let mut best = seg.start;
                for r in seg.clone() {
                    if xv.data()[r * d + c] > xv.data()[best * d + c] {
                        best = r;
                    }
                }
                out.push(xv.data()[best * d + c]);
                argmax.push(best);
            }
        }
        let out = Tensor::matrix(segments.len(), d, out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    /// Multi-head scaled dot-product attention, `softmax(Q K^T / sqrt(d_h)) V`
    /// per head and tile. Output rows not covered by a tile, and query rows
    /// with no visible key, are zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Shape(format!("{} heads do not divide {d}", spec.heads)));
        }
        if let Some(kvalid) = &spec.key_valid {
            if kvalid.len() != kv.rows() {
                return Err(Error::Shape("key mask length".into()));
            }
        }
        for t in &spec.tiles {
            if t.q.end > qv.rows() || t.k.end > kv.rows() {
                return Err(Error::Index(format!("attention tile {t:?} out of range")));
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let dh = d / spec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Tensor::zeros(&[spec.out_rows(), d]);
        let mut probs = Vec::new();
        let mut masked = 0;
        for tile in &spec.tiles {
            let (ql, kl) = (tile.q.len(), tile.k.len());
            let allowed = attention_mask(tile, &spec);
            for h in 0..spec.heads {
                let mut s = vec![T::zero(); ql * kl];
                gemm(
                    scale,
                    View::block(qv.data(), d, tile.q.start, ql, h * dh, dh),
                    View::block(kv.data(), d, tile.k.start, kl, h * dh, dh).t(),
                    T::zero(),
                    ViewMut::matrix(&mut s, ql, kl),
                );
                let mut p = vec![T::zero(); ql * kl];
                for i in 0..ql {
                    let row_ok = &allowed[i * kl..(i + 1) * kl];
                    if !row_ok.iter().any(|&b| b) {
                        masked += 1;
                    }
                    softmax_rows_into(&s[i * kl..(i + 1) * kl], kl, Some(row_ok), &mut p[i * kl..(i + 1) * kl]);
                }
                gemm(
                    T::one(),
                    View::matrix(&p, ql, kl),
                    View::block(vv.data(), d, tile.k.start, kl, h * dh, dh),
                    T::zero(),
                    ViewMut::block(out.data_mut(), d, tile.out, ql, h * dh, dh),
                );
                if needs {
                    probs.push(p);
                }
            }
        }
        self.masked_rows += masked;
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, needs))
    }

    /// Inverted dropout; identity outside training graphs.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 || self.dropout_rng.is_none() {
            return x;
        }
        let mut out = self.value(x).clone();
        let keep = T::of(1.0 / (1.0 - p));
        let rng = self.dropout_rng.as_mut().expect("checked above");
        let mask: Vec<T> = (0..out.numel()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        for (a, &m) in out.data_mut().iter_mut().zip(&mask) {
            *a *= m;
        }
        let needs = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, needs)
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.numel() / xv.cols().max(1), xv.cols());
        if idx.len() != rows {
            return Err(Error::Shape(format!("pick {} indices from {rows} rows", idx.len())));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::Index(format!("pick column {c} of {cols}")));
            }
            data.push(xv.data()[r * cols + c]);
        }
        let out = Tensor::new(vec![rows], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Pick { x, idx: idx.to_vec() }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::of(xv.numel().max(1) as f64));
        let needs = self.needs(x);
        self.push(out, Op::Mean(x), needs)
    }

    /// Gradients of the scalar `loss` with respect to every reachable parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut grads = Gradients::new(self.store.len());
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Graph::backward`] but adds into an existing buffer.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients<T>) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(&node.op, node.value.as_ref(), gy, &mut grads, out);
        }
        Ok(())
    }

    /// Zero-initialized gradient slot for `v`, or `None` if `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.needs(v) {
            return None;
        }
        let shape = self.value(v).shape().to_vec();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn backprop(
        &self,
        op: &Op<T>,
        y: Option<&Tensor<T>>,
        gy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        match op {
            Op::Leaf => {}
            Op::Param(id) => out.add_owned(*id, gy),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    let bview = if *trans_b { bv.view() } else { bv.view().t() };
                    let (r, c) = (av.rows(), av.cols());
                    gemm(T::one(), gy.view(), bview, T::one(), ViewMut::matrix(ga.data_mut(), r, c));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let (r, c) = (bv.rows(), bv.cols());
                    if *trans_b {
                        gemm(T::one(), gy.view().t(), av.view(), T::one(), ViewMut::matrix(gb.data_mut(), r, c));
                    } else {
                        gemm(T::one(), av.view().t(), gy.view(), T::one(), ViewMut::matrix(gb.data_mut(), r, c));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(grads, v) {
                        g.add_assign(&gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &d), &o) in g.data_mut().iter_mut().zip(gy.data()).zip(bv.data()) {
                        *g += d * o;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for ((g, &d), &o) in g.data_mut().iter_mut().zip(gy.data()).zip(av.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.slot(grads, *a) {
                    for (g, &d) in g.data_mut().iter_mut().zip(gy.data()) {
                        *g += d * *s;
                    }
                }
            }
            Op::Relu(a) => {
                let y = y.expect("owned");
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &d), &o) in g.data_mut().iter_mut().zip(gy.data()).zip(y.data()) {
                        if o > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = y.expect("owned");
                let cols = y.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for ((gr, dr), yr) in g
                        .data_mut()
                        .chunks_exact_mut(cols)
                        .zip(gy.data().chunks_exact(cols))
                        .zip(y.data().chunks_exact(cols))
                    {
                        let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, valid } => {
                let y = y.expect("owned");
                let cols = y.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for ((gr, dr), yr) in g
                        .data_mut()
                        .chunks_exact_mut(cols)
                        .zip(gy.data().chunks_exact(cols))
                        .zip(y.data().chunks_exact(cols))
                    {
                        let ok = |j: usize| valid.as_ref().is_none_or(|v| v[j]);
                        let total: T = (0..cols).filter(|&j| ok(j)).map(|j| dr[j]).sum();
                        for j in 0..cols {
                            if ok(j) {
                                gr[j] += dr[j] - yr[j].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let d = gv.numel();
                let dn = T::of(d as f64);
                if let Some(g) = self.slot(grads, *gamma) {
                    for (r, dr) in gy.data().chunks_exact(d).enumerate() {
                        for j in 0..d {
                            g.data_mut()[j] += dr[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *beta) {
                    for dr in gy.data().chunks_exact(d) {
                        for j in 0..d {
                            g.data_mut()[j] += dr[j];
                        }
                    }
                }
                let gamma_v = gv.data().to_vec();
                if let Some(g) = self.slot(grads, *x) {
                    let mut dxh = vec![T::zero(); d];
                    for (r, dr) in gy.data().chunks_exact(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = dr[j] * gamma_v[j];
                        }
                        let m1 = dxh.iter().copied().sum::<T>() / dn;
                        let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let gr = &mut g.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            gr[j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(g) = self.slot(grads, *table) {
                    let d = g.cols();
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &gy.data()[r * d..(r + 1) * d];
                        for (a, &b) in g.row_mut(i).iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).numel();
                if let Some(g) = self.slot(grads, *a) {
                    for (x, &d) in g.data_mut().iter_mut().zip(&gy.data()[..split]) {
                        *x += d;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for (x, &d) in g.data_mut().iter_mut().zip(&gy.data()[split..]) {
                        *x += d;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(g) = self.slot(grads, *x) {
                    let d = g.cols();
                    let dst = &mut g.data_mut()[start * d..start * d + gy.numel()];
                    for (x, &dv) in dst.iter_mut().zip(gy.data()) {
                        *x += dv;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(g) = self.slot(grads, *x) {
                    let d = g.cols();
                    for (i, &r) in argmax.iter().enumerate() {
                        let c = i % d;
                        g.data_mut()[r * d + c] += gy.data()[i];
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_backward(*q, *k, *v, spec, probs, &gy, grads),
            Op::Dropout { x, mask } => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((g, &d), &m) in g.data_mut().iter_mut().zip(gy.data()).zip(mask) {
                        *g += d * m;
                    }
                }
            }
            Op::Pick { x, idx } => {
                if let Some(g) = self.slot(grads, *x) {
                    let cols = g.cols();
                    for (r, &c) in idx.iter().enumerate() {
                        g.data_mut()[r * cols + c] += gy.data()[r];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    let d = gy.item();
                    g.data_mut().iter_mut().for_each(|v| *v += d);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    let d = gy.item() / T::of(g.numel().max(1) as f64);
                    g.data_mut().iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[Vec<T>],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / spec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut pi = 0;
        for tile in &spec.tiles {
            let (ql, kl) = (tile.q.len(), tile.k.len());
            for h in 0..spec.heads {
                let p = &probs[pi];
                pi += 1;
                let go = View::block(gy.data(), d, tile.out, ql, h * dh, dh);
                // dV_h += P^T dO_h
                gemm(
                    T::one(),
                    View::matrix(p, ql, kl).t(),
                    go,
                    T::one(),
                    ViewMut::block(dv.data_mut(), d, tile.k.start, kl, h * dh, dh),
                );
                // dP = dO_h V_h^T
                let mut ds = vec![T::zero(); ql * kl];
                gemm(
                    T::one(),
                    go,
                    View::block(vv.data(), d, tile.k.start, kl, h * dh, dh).t(),
                    T::zero(),
                    ViewMut::matrix(&mut ds, ql, kl),
                );
                // dS = P * (dP - rowdot(dP, P)) * scale
                for i in 0..ql {
                    let pr = &p[i * kl..(i + 1) * kl];
                    let dr = &mut ds[i * kl..(i + 1) * kl];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..kl {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                gemm(
                    T::one(),
                    View::matrix(&ds, ql, kl),
                    View::block(kv.data(), d, tile.k.start, kl, h * dh, dh),
                    T::one(),
                    ViewMut::block(dq.data_mut(), d, tile.q.start, ql, h * dh, dh),
                );
                gemm(
                    T::one(),
                    View::matrix(&ds, ql, kl).t(),
                    View::block(qv.data(), d, tile.q.start, ql, h * dh, dh),
                    T::one(),
                    ViewMut::block(dk.data_mut(), d, tile.k.start, kl, h * dh, dh),
                );
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(grads, var) {
                slot.add_assign(&g);
            }
        }
    }
}

/// Visibility matrix (`q_len x k_len`) for one tile.
fn attention_mask(tile: &Tile, spec: &AttnSpec) -> Vec<bool> {
    let (ql, kl) = (tile.q.len(), tile.k.len());
    let offset = kl as isize - ql as isize;
    let mut m = vec![true; ql * kl];
    for i in 0..ql {
        for j in 0..kl {
            let mut ok = true;
            if spec.causal && j as isize > i as isize + offset {
                ok = false;
            }
            if let Some(kv) = &spec.key_valid {
                ok &= kv[tile.k.start + j];
            }
            m[i * kl + j] = ok;
        }
    }
    m
}
