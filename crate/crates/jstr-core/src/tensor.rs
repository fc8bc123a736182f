//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The op set covers exactly what the recognizer needs: matrix products,
//! bias/residual adds, GELU, row softmax, layer norm, causal masking,
//! row/column slicing and concatenation, embedding gathers, dropout and a
//! masked cross-entropy loss. Storage is f32 with f64 accumulation inside
//! reductions (softmax, layer-norm statistics, the loss).
//!
//! A [`Graph`] is an append-only tape: construction order is topological
//! order, and [`Graph::backward`] walks it in exact reverse, accumulating
//! (`+=`) into input gradients so fan-out works. A graph and its tensors are
//! confined to one thread; distinct graphs on distinct threads are fine.

use std::borrow::Cow;

use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("softmax input contains NaN")]
    NaNInput,
    #[error("cross-entropy mask selects no positions")]
    EmptyMask,
    #[error("target id {id} outside vocabulary of size {vocab}")]
    IndexOutOfVocab { id: usize, vocab: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    DoubleBackward,
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// A standalone tensor: the persistent form used for model parameters.
/// `grad` accumulates across backward passes until [`Tensor::zero_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// A trainable parameter tensor.
    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// `grad += g`, allocating on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Additive value for masked-out attention scores. Finite so f32 arithmetic
/// stays NaN-free; exp(x - max) underflows to exactly 0 for masked entries.
const MASK_NEG: f32 = -1.0e30;

enum Op {
    Leaf,
    /// C[m,n] = A[m,k] · B[k,n]
    Matmul(TensorId, TensorId),
    /// C[m,n] = A[m,k] · B[n,k]ᵀ
    MatmulNt(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// x[m,n] + b[n] broadcast over rows
    AddBias(TensorId, TensorId),
    Scale(TensorId, f32),
    Gelu { x: TensorId, tanh: Vec<f32> },
    SoftmaxLastDim(TensorId),
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f32 },
    CausalMask(TensorId),
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    GatherRows { table: TensorId, idx: Vec<usize> },
    /// One attention head over a causal prefix: scores, softmax and the
    /// value mix fused, with the softmax weights saved for backward.
    CausalAttnHead {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        offset: usize,
        head_dim: usize,
        scale: f32,
        weights: Vec<f32>,
    },
    /// Elementwise multiply by a saved 0-or-1/(1-p) mask.
    Dropout { x: TensorId, mask: Vec<f32> },
    CrossEntropyMasked { logits: TensorId, targets: Vec<usize>, mask: Vec<bool> },
    SumAll(TensorId),
}

struct Node<'a> {
    data: Cow<'a, [f32]>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Append-only autodiff tape. Nodes hold either borrowed leaf data (model
/// parameters, input patches) or owned intermediate buffers.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(128), grads: Vec::new(), backward_done: false }
    }

    fn push(&mut self, data: Cow<'a, [f32]>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { data, shape, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a persistent tensor as a leaf, borrowing its data.
    pub fn leaf(&mut self, t: &'a Tensor) -> TensorId {
        self.push(Cow::Borrowed(&t.data), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    /// Insert a borrowed read-only input (never differentiated).
    pub fn input(&mut self, shape: Vec<usize>, data: &'a [f32]) -> TensorId {
        self.push(Cow::Borrowed(data), shape, false, Op::Leaf)
    }

    /// Insert an owned leaf.
    pub fn leaf_owned(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> TensorId {
        self.push(Cow::Owned(data), shape, requires_grad, Op::Leaf)
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of a node, populated by [`Graph::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every requires-grad leaf, in leaf insertion order.
    /// `None` before backward has run; per-leaf `None` for leaves the loss
    /// never reached.
    pub fn param_leaf_grads(&self) -> Option<Vec<Option<Vec<f32>>>> {
        if !self.backward_done {
            return None;
        }
        Some(
            self.nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
                .map(|(i, _)| self.grads[i].clone())
                .collect(),
        )
    }

    fn rows_cols(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(shape_err(op, format!("expected 2-d tensor, got {s:?}"))),
        }
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), m, ka, n, &mut out);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, n], rg, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` — used for attention scores and the tied output projection.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rows_cols(a, "matmul_nt")?;
        let (n, kb) = self.rows_cols(b, "matmul_nt")?;
        if ka != kb {
            return Err(shape_err("matmul_nt", format!("inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.data(a), self.data(b), m, ka, n, &mut out);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, n], rg, Op::MatmulNt(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Cow::Owned(out), shape, rg, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.rows_cols(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for row width {n}", self.shape(bias)),
            ));
        }
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, n], rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> TensorId {
        let out: Vec<f32> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Cow::Owned(out), shape, rg, Op::Scale(x, c))
    }

    /// Tanh-approximation GELU, elementwise. The tanh values are saved for
    /// the backward pass.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len();
        let mut out = vec![0.0f32; n];
        let mut tanh = vec![0.0f32; n];
        for ((&v, o), t) in self.data(x).iter().zip(out.iter_mut()).zip(tanh.iter_mut()) {
            let (y, th) = kernels::gelu_parts(v);
            *o = y;
            *t = th;
        }
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Cow::Owned(out), shape, rg, Op::Gelu { x, tanh })
    }

    /// Row softmax with max-subtraction; sums accumulate in f64.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.rows_cols(x, "softmax_lastdim")?;
        if n == 0 {
            return Err(shape_err("softmax_lastdim", "empty last dim".to_string()));
        }
        let xd = self.data(x);
        if xd.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NaNInput);
        }
        let mut out = vec![0.0f32; m * n];
        for (row_in, row_out) in xd.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            kernels::softmax_row(row_in, row_out);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, n], rg, Op::SoftmaxLastDim(x)))
    }

    /// Per-row zero-mean/unit-variance normalization followed by the
    /// elementwise affine `gamma * xhat + beta`. Statistics in f64.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<TensorId> {
        let (m, d) = self.rows_cols(x, "layer_norm")?;
        if d == 0 {
            return Err(shape_err("layer_norm", "empty rows".to_string()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} for width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let mut out = vec![0.0f32; m * d];
        {
            let xd = self.data(x);
            let g = self.data(gamma);
            let b = self.data(beta);
            for (row_in, row_out) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                kernels::layer_norm_row(row_in, g, b, eps, row_out);
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, d], rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Additively mask the strict upper triangle of a square score matrix so
    /// position t only attends to positions <= t.
    pub fn causal_mask(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.rows_cols(x, "causal_mask")?;
        if m != n {
            return Err(shape_err("causal_mask", format!("non-square {m}x{n}")));
        }
        let mut out = self.data(x).to_vec();
        for i in 0..m {
            for v in &mut out[i * n + i + 1..(i + 1) * n] {
                *v = MASK_NEG;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, n], rg, Op::CausalMask(x)))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.rows_cols(x, "slice_rows")?;
        if start + len > m {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![len, n], rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.rows_cols(x, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for row in xd.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, len], rg, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let (_, n) = self.rows_cols(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (m, np) = self.rows_cols(p, "concat_rows")?;
            if np != n {
                return Err(shape_err("concat_rows", format!("widths {n} vs {np}")));
            }
            rows += m;
            out.extend_from_slice(self.data(p));
            rg |= self.nodes[p.0].requires_grad;
        }
        Ok(self.push(Cow::Owned(out), vec![rows, n], rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let (m, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (mp, np) = self.rows_cols(p, "concat_cols")?;
            if mp != m {
                return Err(shape_err("concat_cols", format!("rows {m} vs {mp}")));
            }
            widths.push(np);
            total += np;
            rg |= self.nodes[p.0].requires_grad;
        }
        let mut out = vec![0.0f32; m * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for r in 0..m {
                out[r * total + col..r * total + col + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            col += w;
        }
        Ok(self.push(Cow::Owned(out), vec![m, total], rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Embedding lookup: rows of `table` selected by `idx`. Gradients
    /// scatter-add back into the table, so repeated indices accumulate.
    pub fn gather_rows(&mut self, table: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (rows, n) = self.rows_cols(table, "gather_rows")?;
        let td = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return Err(shape_err("gather_rows", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(&td[i * n..(i + 1) * n]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Cow::Owned(out),
            vec![idx.len(), n],
            rg,
            Op::GatherRows { table, idx: idx.to_vec() },
        ))
    }

    /// One causal attention head reading columns `offset..offset+head_dim`
    /// of `q`, `k`, `v` (each `[t, d]`). Row `i` attends to rows `0..=i`:
    /// scaled dot-product scores, row softmax (f64 accumulation), then the
    /// weighted value mix, identical in rounding to computing the same rows
    /// through matmul_nt + scale + causal_mask + softmax + matmul.
    pub fn causal_attn_head(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        offset: usize,
        head_dim: usize,
        scale: f32,
    ) -> Result<TensorId> {
        let (t, d) = self.rows_cols(q, "causal_attn_head")?;
        for id in [k, v] {
            if self.shape(id) != [t, d] {
                return Err(shape_err(
                    "causal_attn_head",
                    format!("q {:?} vs {:?}", [t, d], self.shape(id)),
                ));
            }
        }
        if offset + head_dim > d {
            return Err(shape_err(
                "causal_attn_head",
                format!("columns {offset}..{} of {d}", offset + head_dim),
            ));
        }
        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let mut weights = vec![0.0f32; t * t];
        let mut out = vec![0.0f32; t * head_dim];
        let mut scores = vec![0.0f32; t];
        for i in 0..t {
            let q_row = &qd[i * d + offset..i * d + offset + head_dim];
            for (j, s) in scores[..=i].iter_mut().enumerate() {
                let k_row = &kd[j * d + offset..j * d + offset + head_dim];
                *s = kernels::dot(q_row, k_row) * scale;
            }
            if scores[..=i].iter().any(|s| s.is_nan()) {
                return Err(TensorError::NaNInput);
            }
            let w_row = &mut weights[i * t..i * t + i + 1];
            kernels::softmax_row(&scores[..=i], w_row);
            let out_row = &mut out[i * head_dim..(i + 1) * head_dim];
            for (j, &w) in w_row.iter().enumerate() {
                let v_row = &vd[j * d + offset..j * d + offset + head_dim];
                for (o, &vv) in out_row.iter_mut().zip(v_row) {
                    *o += w * vv;
                }
            }
        }
        let rg = self.nodes[q.0].requires_grad
            || self.nodes[k.0].requires_grad
            || self.nodes[v.0].requires_grad;
        Ok(self.push(
            Cow::Owned(out),
            vec![t, head_dim],
            rg,
            Op::CausalAttnHead { q, k, v, offset, head_dim, scale, weights },
        ))
    }

    /// Inverted dropout: keep with probability 1-p and scale by 1/(1-p).
    /// All randomness comes from the supplied generator.
    pub fn dropout(&mut self, x: TensorId, p: f32, rng: &mut SplitMix64) -> TensorId {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f32> = self
            .data(x)
            .iter()
            .map(|_| if rng.next_f32() >= p { keep_scale } else { 0.0 })
            .collect();
        let out: Vec<f32> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Cow::Owned(out), shape, rg, Op::Dropout { x, mask })
    }

    /// Mean negative log-likelihood over masked positions only, log-sum-exp
    /// stabilized with f64 accumulation.
    pub fn cross_entropy_masked(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let (t, v) = self.rows_cols(logits, "cross_entropy_masked")?;
        if targets.len() != t || mask.len() != t {
            return Err(shape_err(
                "cross_entropy_masked",
                format!("{t} rows vs {} targets / {} mask bits", targets.len(), mask.len()),
            ));
        }
        let n_active = mask.iter().filter(|&&b| b).count();
        if n_active == 0 {
            return Err(TensorError::EmptyMask);
        }
        for (&tgt, &m) in targets.iter().zip(mask) {
            if m && tgt >= v {
                return Err(TensorError::IndexOutOfVocab { id: tgt, vocab: v });
            }
        }
        let ld = self.data(logits);
        let mut total = 0.0f64;
        for (row, (&tgt, _)) in ld
            .chunks_exact(v)
            .zip(targets.iter().zip(mask))
            .filter(|(_, (_, &m))| m)
        {
            total += kernels::log_sum_exp(row) - row[tgt] as f64;
        }
        let loss = (total / n_active as f64) as f32;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            rg,
            Op::CrossEntropyMasked { logits, targets: targets.to_vec(), mask: mask.to_vec() },
        ))
    }

    /// Sum of all elements (scalar). Mostly useful as a test loss.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Cow::Owned(vec![s as f32]), vec![1], rg, Op::SumAll(x))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients of every
    /// requires-grad node reachable from the loss are populated and can be
    /// read with [`Graph::grad`]. Calling twice is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else { continue };
            self.apply_backward(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn wants_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Run `f` with the (lazily allocated) gradient buffer of `id` taken out
    /// of the graph, so `f` can read node data while accumulating into it.
    fn with_grad(&mut self, id: TensorId, f: impl FnOnce(&Self, &mut [f32])) {
        let mut g = self.grads[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[id.0].data.len()]);
        f(self, &mut g);
        self.grads[id.0] = Some(g);
    }

    fn apply_backward(&mut self, i: usize, grad: &[f32]) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            &Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants_grad(a) {
                    self.with_grad(a, |s, g| kernels::matmul_nt(grad, s.data(b), m, n, k, g));
                }
                if self.wants_grad(b) {
                    self.with_grad(b, |s, g| kernels::matmul_tn(s.data(a), grad, m, k, n, g));
                }
            }

            &Op::MatmulNt(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.wants_grad(a) {
                    self.with_grad(a, |s, g| kernels::matmul(grad, s.data(b), m, n, k, g));
                }
                if self.wants_grad(b) {
                    self.with_grad(b, |s, g| kernels::matmul_tn(grad, s.data(a), m, n, k, g));
                }
            }

            &Op::Add(a, b) => {
                if self.wants_grad(a) {
                    self.with_grad(a, |_, g| kernels::axpy_all(g, grad));
                }
                if self.wants_grad(b) {
                    self.with_grad(b, |_, g| kernels::axpy_all(g, grad));
                }
            }

            &Op::AddBias(x, bias) => {
                let n = self.shape(bias)[0];
                if self.wants_grad(x) {
                    self.with_grad(x, |_, g| kernels::axpy_all(g, grad));
                }
                if self.wants_grad(bias) {
                    self.with_grad(bias, |_, g| {
                        for row in grad.chunks_exact(n) {
                            kernels::axpy_all(g, row);
                        }
                    });
                }
            }

            &Op::Scale(x, c) => {
                if self.wants_grad(x) {
                    self.with_grad(x, |_, g| {
                        for (gv, &dv) in g.iter_mut().zip(grad) {
                            *gv += c * dv;
                        }
                    });
                }
            }

            Op::Gelu { x, .. } => {
                let x = *x;
                if self.wants_grad(x) {
                    self.with_grad(x, |s, g| {
                        let Op::Gelu { tanh, .. } = &s.nodes[i].op else { unreachable!() };
                        for (((gv, &xv), &tv), &dv) in
                            g.iter_mut().zip(s.data(x)).zip(tanh).zip(grad)
                        {
                            *gv += kernels::gelu_deriv_cached(xv, tv) * dv;
                        }
                    });
                }
            }

            &Op::SoftmaxLastDim(x) => {
                if self.wants_grad(x) {
                    let n = *self.shape(i_id(i)).last().unwrap();
                    self.with_grad(x, |s, g| {
                        let out = s.data(i_id(i));
                        for ((s_row, g_row), dx_row) in out
                            .chunks_exact(n)
                            .zip(grad.chunks_exact(n))
                            .zip(g.chunks_exact_mut(n))
                        {
                            let dot: f64 = s_row
                                .iter()
                                .zip(g_row)
                                .map(|(&sv, &gv)| sv as f64 * gv as f64)
                                .sum();
                            for ((&sv, &gv), d) in s_row.iter().zip(g_row).zip(dx_row.iter_mut()) {
                                *d += (sv as f64 * (gv as f64 - dot)) as f32;
                            }
                        }
                    });
                }
            }

            &Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.shape(gamma)[0];
                let xd = self.data(x);
                let gd = self.data(gamma);
                let mut dx = vec![0.0f32; xd.len()];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for (row, (g_row, dx_row)) in xd
                    .chunks_exact(d)
                    .zip(grad.chunks_exact(d).zip(dx.chunks_exact_mut(d)))
                {
                    kernels::layer_norm_backward_row(
                        row, gd, eps, g_row, dx_row, &mut dgamma, &mut dbeta,
                    );
                }
                if self.wants_grad(x) {
                    self.with_grad(x, |_, g| kernels::axpy_all(g, &dx));
                }
                if self.wants_grad(gamma) {
                    self.with_grad(gamma, |_, g| kernels::axpy_all(g, &dgamma));
                }
                if self.wants_grad(beta) {
                    self.with_grad(beta, |_, g| kernels::axpy_all(g, &dbeta));
                }
            }

            &Op::CausalMask(x) => {
                if self.wants_grad(x) {
                    let n = self.shape(x)[1];
                    self.with_grad(x, |_, g| {
                        for (r, (g_row, d_row)) in
                            g.chunks_exact_mut(n).zip(grad.chunks_exact(n)).enumerate()
                        {
                            kernels::axpy_all(&mut g_row[..=r], &d_row[..=r]);
                        }
                    });
                }
            }

            &Op::SliceRows { x, start } => {
                if self.wants_grad(x) {
                    let n = self.shape(x)[1];
                    let off = start * n;
                    self.with_grad(x, |_, g| kernels::axpy_all(&mut g[off..off + grad.len()], grad));
                }
            }

            &Op::SliceCols { x, start } => {
                if self.wants_grad(x) {
                    let n = self.shape(x)[1];
                    let w = self.shape(i_id(i))[1];
                    self.with_grad(x, |_, g| {
                        for (r, g_row) in grad.chunks_exact(w).enumerate() {
                            kernels::axpy_all(&mut g[r * n + start..r * n + start + w], g_row);
                        }
                    });
                }
            }

            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.wants_grad(p) {
                        let piece = &grad[off..off + len];
                        self.with_grad(p, |_, g| kernels::axpy_all(g, piece));
                    }
                    off += len;
                }
            }

            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = self.shape(i_id(i))[1];
                let m = self.shape(i_id(i))[0];
                let mut col = 0;
                for p in parts {
                    let w = self.shape(p)[1];
                    if self.wants_grad(p) {
                        self.with_grad(p, |_, g| {
                            for r in 0..m {
                                kernels::axpy_all(
                                    &mut g[r * w..(r + 1) * w],
                                    &grad[r * total + col..r * total + col + w],
                                );
                            }
                        });
                    }
                    col += w;
                }
            }

            Op::GatherRows { table, idx } => {
                let table = *table;
                let idx = idx.clone();
                if self.wants_grad(table) {
                    let n = self.shape(table)[1];
                    self.with_grad(table, |_, g| {
                        for (row, &i) in grad.chunks_exact(n).zip(&idx) {
                            kernels::axpy_all(&mut g[i * n..(i + 1) * n], row);
                        }
                    });
                }
            }

            Op::CausalAttnHead { q, k, v, offset, head_dim, scale, .. } => {
                let (q, k, v) = (*q, *k, *v);
                let (offset, head_dim, scale) = (*offset, *head_dim, *scale);
                let t = self.shape(i_id(i))[0];
                let d = self.shape(q)[1];
                let mut dq = vec![0.0f32; t * head_dim];
                let mut dk = vec![0.0f32; t * head_dim];
                let mut dv = vec![0.0f32; t * head_dim];
                {
                    let Op::CausalAttnHead { weights, .. } = &self.nodes[i].op else {
                        unreachable!()
                    };
                    let qd = self.data(q);
                    let kd = self.data(k);
                    let vd = self.data(v);
                    let mut dw = vec![0.0f32; t];
                    for row in 0..t {
                        let g_row = &grad[row * head_dim..(row + 1) * head_dim];
                        let w_row = &weights[row * t..row * t + row + 1];
                        for (j, dwj) in dw[..=row].iter_mut().enumerate() {
                            *dwj =
                                kernels::dot(g_row, &vd[j * d + offset..j * d + offset + head_dim]);
                        }
                        let mix: f64 = w_row
                            .iter()
                            .zip(&dw[..=row])
                            .map(|(&w, &x)| w as f64 * x as f64)
                            .sum();
                        let q_row = &qd[row * d + offset..row * d + offset + head_dim];
                        for (j, (&w, &dwj)) in w_row.iter().zip(&dw[..=row]).enumerate() {
                            let ds = (w as f64 * (dwj as f64 - mix)) as f32 * scale;
                            let k_row = &kd[j * d + offset..j * d + offset + head_dim];
                            let dq_row = &mut dq[row * head_dim..(row + 1) * head_dim];
                            for (o, &kv) in dq_row.iter_mut().zip(k_row) {
                                *o += ds * kv;
                            }
                            let dk_row = &mut dk[j * head_dim..(j + 1) * head_dim];
                            for (o, &qv) in dk_row.iter_mut().zip(q_row) {
                                *o += ds * qv;
                            }
                            let dv_row = &mut dv[j * head_dim..(j + 1) * head_dim];
                            for (o, &gv) in dv_row.iter_mut().zip(g_row) {
                                *o += w * gv;
                            }
                        }
                    }
                }
                let scatter = |g: &mut [f32], src: &[f32]| {
                    for (r, s_row) in src.chunks_exact(head_dim).enumerate() {
                        kernels::axpy_all(&mut g[r * d + offset..r * d + offset + head_dim], s_row);
                    }
                };
                if self.wants_grad(q) {
                    self.with_grad(q, |_, g| scatter(g, &dq));
                }
                if self.wants_grad(k) {
                    self.with_grad(k, |_, g| scatter(g, &dk));
                }
                if self.wants_grad(v) {
                    self.with_grad(v, |_, g| scatter(g, &dv));
                }
            }

            Op::Dropout { x, .. } => {
                let x = *x;
                if self.wants_grad(x) {
                    self.with_grad(x, |s, g| {
                        let Op::Dropout { mask, .. } = &s.nodes[i].op else { unreachable!() };
                        for ((gv, &dv), &mv) in g.iter_mut().zip(grad).zip(mask) {
                            *gv += dv * mv;
                        }
                    });
                }
            }

            Op::CrossEntropyMasked { logits, .. } => {
                let logits = *logits;
                if self.wants_grad(logits) {
                    let v = self.shape(logits)[1];
                    self.with_grad(logits, |s, g| {
                        let Op::CrossEntropyMasked { targets, mask, .. } = &s.nodes[i].op else {
                            unreachable!()
                        };
                        let n_active = mask.iter().filter(|&&b| b).count() as f64;
                        let upstream = grad[0] as f64;
                        let ld = s.data(logits);
                        let mut probs = vec![0.0f32; v];
                        for ((row, g_row), (&tgt, _)) in ld
                            .chunks_exact(v)
                            .zip(g.chunks_exact_mut(v))
                            .zip(targets.iter().zip(mask))
                            .filter(|(_, (_, &m))| m)
                        {
                            kernels::softmax_row(row, &mut probs);
                            for (j, (d, &p)) in g_row.iter_mut().zip(&probs).enumerate() {
                                let one_hot = if j == tgt { 1.0 } else { 0.0 };
                                *d += ((p as f64 - one_hot) * upstream / n_active) as f32;
                            }
                        }
                    });
                }
            }

            &Op::SumAll(x) => {
                if self.wants_grad(x) {
                    let g0 = grad[0];
                    self.with_grad(x, |_, g| {
                        for v in g.iter_mut() {
                            *v += g0;
                        }
                    });
                }
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn i_id(i: usize) -> TensorId {
    TensorId(i)
}

/// Low-level row-major kernels shared by the autodiff graph and the
/// incremental decoder. Both paths must use these exact routines so that
/// teacher-forced and step-by-step logits agree bit-for-bit.
pub(crate) mod kernels {
    /// C[m,n] += A[m,k] · B[k,n]
    ///
    /// The k loop is unrolled by four so each output row is loaded and
    /// stored once per four fused multiply-adds.
    pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        let k4 = k - k % 4;
        for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            let mut kk = 0;
            while kk < k4 {
                let (a0, a1, a2, a3) = (a_row[kk], a_row[kk + 1], a_row[kk + 2], a_row[kk + 3]);
                let b0 = &b[kk * n..kk * n + n];
                let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
                let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
                let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
                for j in 0..n {
                    out_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                kk += 4;
            }
            for kk in k4..k {
                let av = a_row[kk];
                let b_row = &b[kk * n..kk * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    /// C[m,n] += A[m,k] · B[n,k]ᵀ  (rows of both operands are contiguous)
    pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(out.len(), m * n);
        for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
                *o += dot(a_row, b_row);
            }
        }
    }

    /// C[k,n] += A[m,k]ᵀ · B[m,n], with the m loop unrolled by four.
    pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), m * n);
        debug_assert_eq!(out.len(), k * n);
        let m4 = m - m % 4;
        let mut i = 0;
        while i < m4 {
            let a0 = &a[i * k..(i + 1) * k];
            let a1 = &a[(i + 1) * k..(i + 2) * k];
            let a2 = &a[(i + 2) * k..(i + 3) * k];
            let a3 = &a[(i + 3) * k..(i + 4) * k];
            let b0 = &b[i * n..(i + 1) * n];
            let b1 = &b[(i + 1) * n..(i + 2) * n];
            let b2 = &b[(i + 2) * n..(i + 3) * n];
            let b3 = &b[(i + 3) * n..(i + 4) * n];
            for (kk, out_row) in out.chunks_exact_mut(n).enumerate() {
                let (c0, c1, c2, c3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                for j in 0..n {
                    out_row[j] += c0 * b0[j] + c1 * b1[j] + c2 * b2[j] + c3 * b3[j];
                }
            }
            i += 4;
        }
        for i in m4..m {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n..(i + 1) * n];
            for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    /// f32 dot product over sixteen fixed accumulator lanes (vectorizes
    /// well; the summation order is fixed, so results stay identical between
    /// the batched and incremental paths, which both call this).
    #[inline]
    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f32; 16];
        let mut a_it = a.chunks_exact(16);
        let mut b_it = b.chunks_exact(16);
        for (ac, bc) in (&mut a_it).zip(&mut b_it) {
            for j in 0..16 {
                acc[j] += ac[j] * bc[j];
            }
        }
        let mut s = 0.0f32;
        for pair in 0..8 {
            s += acc[pair] + acc[pair + 8];
        }
        for (&x, &y) in a_it.remainder().iter().zip(b_it.remainder()) {
            s += x * y;
        }
        s
    }

    #[inline]
    pub fn axpy_all(acc: &mut [f32], src: &[f32]) {
        debug_assert_eq!(acc.len(), src.len());
        for (a, &s) in acc.iter_mut().zip(src) {
            *a += s;
        }
    }

    const GELU_C: f32 = 0.7978845608028654; // sqrt(2/pi)

    #[inline]
    pub fn gelu(x: f32) -> f32 {
        gelu_parts(x).0
    }

    /// GELU value plus the inner tanh, which the backward pass reuses.
    #[inline]
    pub fn gelu_parts(x: f32) -> (f32, f32) {
        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
        (0.5 * x * (1.0 + t), t)
    }

    #[inline]
    pub fn gelu_deriv_cached(x: f32, t: f32) -> f32 {
        let sech2 = 1.0 - t * t;
        let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
    }


    /// Max-subtracted softmax of one row; the sum accumulates in f64.
    pub fn softmax_row(row: &[f32], out: &mut [f32]) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (o, &v) in out.iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            *o = e as f32;
            sum += e;
        }
        let inv = (1.0 / sum) as f32;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }

    /// log(sum(exp(row))) in f64 with max subtraction.
    pub fn log_sum_exp(row: &[f32]) -> f64 {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        max + sum.ln()
    }

    /// Row mean and 1/sqrt(var + eps) in f64.
    pub fn layer_norm_stats(row: &[f32], eps: f32) -> (f64, f64) {
        let d = row.len() as f64;
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d;
        let var: f64 = row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / d;
        (mean, 1.0 / (var + eps as f64).sqrt())
    }

    pub fn layer_norm_row(row: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
        let (mean, inv_std) = layer_norm_stats(row, eps);
        for ((o, &v), (&g, &b)) in out.iter_mut().zip(row).zip(gamma.iter().zip(beta)) {
            *o = (((v as f64 - mean) * inv_std) * g as f64 + b as f64) as f32;
        }
    }

    pub fn layer_norm_backward_row(
        row: &[f32],
        gamma: &[f32],
        eps: f32,
        dout: &[f32],
        dx: &mut [f32],
        dgamma: &mut [f32],
        dbeta: &mut [f32],
    ) {
        let d = row.len();
        let (mean, inv_std) = layer_norm_stats(row, eps);
        let mut dxhat = vec![0.0f64; d];
        let mut dxhat_sum = 0.0f64;
        let mut dxhat_xhat_sum = 0.0f64;
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * inv_std;
            let dh = dout[j] as f64 * gamma[j] as f64;
            dxhat[j] = dh;
            dxhat_sum += dh;
            dxhat_xhat_sum += dh * xhat;
            dgamma[j] += (dout[j] as f64 * xhat) as f32;
            dbeta[j] += dout[j];
        }
        let df = d as f64;
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * inv_std;
            dx[j] = (inv_std / df * (df * dxhat[j] - dxhat_sum - xhat * dxhat_xhat_sum)) as f32;
        }
    }
}
