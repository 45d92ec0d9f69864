//! Append-only computation tape for reverse-mode differentiation.
//!
//! Every operation pushes one node holding the computed value plus the
//! handles of its inputs; `backward` walks the nodes in reverse. Nodes are
//! in topological order by construction. A tape and its tensors are
//! confined to one thread; distinct tapes may run in parallel.

use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// alpha * a + beta, elementwise with constants.
    AffineConst { a: TensorId, alpha: f64, beta: f64 },
    /// Broadcast scalar node `s` (numel 1) over `a`.
    MulScalar { a: TensorId, s: TensorId },
    AddRowBroadcast { a: TensorId, bias: TensorId },
    Sigmoid { a: TensorId },
    Relu { a: TensorId },
    SoftmaxRows { a: TensorId, mask: Option<Vec<bool>> },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    MeanRows { a: TensorId },
    SumAll { a: TensorId },
    CrossEntropy { logits: TensorId, target: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by tape handle.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Parameter handles for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub w_q: TensorId,
    pub b_q: TensorId,
    pub w_k: TensorId,
    pub b_k: TensorId,
    pub w_v: TensorId,
    pub b_v: TensorId,
    pub w_o: TensorId,
    pub b_o: TensorId,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(TensorError::DimMismatch {
            op,
            detail: format!("expected rank-2 tensor, got shape {other:?}"),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Drop every node from `mark` onward; handles below `mark` stay valid.
    /// Lets one tape host parameters once and run many forward passes.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn out(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires: bool) -> TensorId {
        let value = Tensor::new(shape, data).expect("op produced a valid tensor");
        self.push(value, op, requires)
    }

    // ─── forward ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.req(a) || self.req(b);
        Ok(self.out(data, vec![m, n], Op::MatMul { a, b }, req))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let req = self.req(a);
        Ok(self.out(data, vec![n, m], Op::Transpose { a }, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::DimMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.out(data, shape, mk(a, b), req))
    }

    /// `alpha * a + beta` elementwise with compile-time constants.
    pub fn affine_const(&mut self, a: TensorId, alpha: f64, beta: f64) -> TensorId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| alpha * x + beta).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a);
        self.out(data, shape, Op::AffineConst { a, alpha, beta }, req)
    }

    /// Broadcast-multiply `a` by the scalar node `s` (numel 1).
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::DimMismatch {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).data()[0];
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * sv).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a) || self.req(s);
        Ok(self.out(data, shape, Op::MulScalar { a, s }, req))
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }

    pub fn add_row_broadcast(
        &mut self,
        a: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(self.value(a), "add_row_broadcast")?;
        let bv = self.value(bias);
        if bv.shape() != [n] {
            return Err(TensorError::DimMismatch {
                op: "add_row_broadcast",
                detail: format!("bias shape {:?}, expected [{n}]", bv.shape()),
            });
        }
        let bdat = bv.data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bdat[j];
            }
        }
        let req = self.req(a) || self.req(bias);
        Ok(self.out(data, vec![m, n], Op::AddRowBroadcast { a, bias }, req))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a);
        self.out(data, shape, Op::Sigmoid { a }, req)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a);
        self.out(data, shape, Op::Relu { a }, req)
    }

    /// Row-wise softmax with optional boolean mask (`false` = masked out).
    /// Masked entries are exactly 0 in the output; the max-subtraction uses
    /// only unmasked entries. A fully masked row is an error.
    pub fn softmax_rows(
        &mut self,
        a: TensorId,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(self.value(a), "softmax_rows")?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(TensorError::DimMismatch {
                    op: "softmax_rows",
                    detail: format!("mask length {} for {m}x{n}", mk.len()),
                });
            }
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let live = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if live(j) {
                    mx = mx.max(row[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let mut denom = 0.0;
            for j in 0..n {
                if live(j) {
                    let e = (row[j] - mx).exp();
                    data[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= denom;
            }
        }
        let req = self.req(a);
        Ok(self.out(
            data,
            vec![m, n],
            Op::SoftmaxRows {
                a,
                mask: mask.map(|m| m.to_vec()),
            },
            req,
        ))
    }

    /// Per-row layer normalization (population variance) with affine output.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(self.value(x), "layer_norm")?;
        if n < 2 {
            return Err(TensorError::Config {
                op: "layer_norm",
                detail: format!("feature dim must be >= 2, got {n}"),
            });
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [n] {
                return Err(TensorError::DimMismatch {
                    op: "layer_norm",
                    detail: format!("{name} shape {:?}, expected [{n}]", self.value(id).shape()),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = vec![0.0; m * n];
        let nf = n as f64;
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.out(data, vec![m, n], Op::LayerNorm { x, gamma, beta, eps }, req))
    }

    /// Vertically stack rank-2 tensors with a common column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Config {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let (_, n) = dims2(self.value(parts[0]), "concat_rows")?;
        let mut data = Vec::new();
        let mut m = 0;
        let mut req = false;
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(TensorError::DimMismatch {
                    op: "concat_rows",
                    detail: format!("column counts {n} vs {pn}"),
                });
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
            req |= self.req(p);
        }
        Ok(self.out(data, vec![m, n], Op::ConcatRows { parts: parts.to_vec() }, req))
    }

    /// Horizontally stack rank-2 tensors with a common row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Config {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let (m, _) = dims2(self.value(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut req = false;
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {m} vs {pm}"),
                });
            }
            widths.push(pn);
            total += pn;
            req |= self.req(p);
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.out(data, vec![m, total], Op::ConcatCols { parts: parts.to_vec() }, req))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(
        &mut self,
        a: TensorId,
        start: usize,
        end: usize,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(self.value(a), "slice_rows")?;
        if start >= end || end > m {
            return Err(TensorError::DimMismatch {
                op: "slice_rows",
                detail: format!("range {start}..{end} of {m} rows"),
            });
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let req = self.req(a);
        Ok(self.out(data, vec![end - start, n], Op::SliceRows { a, start }, req))
    }

    pub fn row(&mut self, a: TensorId, i: usize) -> Result<TensorId, TensorError> {
        self.slice_rows(a, i, i + 1)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        end: usize,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(self.value(a), "slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::DimMismatch {
                op: "slice_cols",
                detail: format!("range {start}..{end} of {n} cols"),
            });
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * n + start..i * n + end]);
        }
        let req = self.req(a);
        Ok(self.out(data, vec![m, w], Op::SliceCols { a, start }, req))
    }

    /// Mean over rows of a rank-2 tensor, giving `[1 x n]`.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(self.value(a), "mean_rows")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let req = self.req(a);
        Ok(self.out(data, vec![1, n], Op::MeanRows { a }, req))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).data().iter().sum();
        let req = self.req(a);
        self.out(vec![s], vec![1], Op::SumAll { a }, req)
    }

    /// Stable cross-entropy of the flattened logits against `target`:
    /// `logsumexp(logits) - logits[target]`, as a `[1]` scalar.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        target: usize,
    ) -> Result<TensorId, TensorError> {
        let v = self.value(logits);
        let n = v.numel();
        if target >= n {
            return Err(TensorError::Config {
                op: "cross_entropy",
                detail: format!("target {target} out of {n} logits"),
            });
        }
        let src = v.data();
        let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + src.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        let loss = lse - src[target];
        let req = self.req(logits);
        Ok(self.out(vec![loss], vec![1], Op::CrossEntropy { logits, target }, req))
    }

    /// Multi-head scaled-dot-product attention. `q_in` is `[m x d]`,
    /// `k_in`/`v_in` are `[n x d]`; `key_mask` (length n, `false` = masked)
    /// hides keys from every query. Scale is `1/sqrt(d/h)`.
    pub fn multi_head_attention(
        &mut self,
        q_in: TensorId,
        k_in: TensorId,
        v_in: TensorId,
        params: &MhaParams,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<TensorId, TensorError> {
        let (m, d) = dims2(self.value(q_in), "multi_head_attention")?;
        let (n, dk) = dims2(self.value(k_in), "multi_head_attention")?;
        let (nv, dv) = dims2(self.value(v_in), "multi_head_attention")?;
        if dk != d || dv != d || nv != n {
            return Err(TensorError::DimMismatch {
                op: "multi_head_attention",
                detail: format!("q [{m}x{d}], k [{n}x{dk}], v [{nv}x{dv}]"),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config {
                op: "multi_head_attention",
                detail: format!("model dim {d} not divisible by {heads} heads"),
            });
        }
        if let Some(mk) = key_mask {
            if mk.len() != n {
                return Err(TensorError::DimMismatch {
                    op: "multi_head_attention",
                    detail: format!("key mask length {} for {n} keys", mk.len()),
                });
            }
            if mk.iter().all(|&b| !b) {
                return Err(TensorError::DegenerateRow { row: 0 });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.linear(q_in, params.w_q, params.b_q)?;
        let k = self.linear(k_in, params.w_k, params.b_k)?;
        let v = self.linear(v_in, params.w_v, params.b_v)?;
        let full_mask: Option<Vec<bool>> = key_mask.map(|mk| {
            let mut fm = Vec::with_capacity(m * n);
            for _ in 0..m {
                fm.extend_from_slice(mk);
            }
            fm
        });
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = self.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = self.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scaled = self.affine_const(scores, scale, 0.0);
            let attn = self.softmax_rows(scaled, full_mask.as_deref())?;
            head_outs.push(self.matmul(attn, vh)?);
        }
        let cat = self.concat_cols(&head_outs)?;
        self.linear(cat, params.w_o, params.b_o)
    }

    // ─── backward ──────────────────────────────────────────────────────

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// node. The tape is left intact and reusable for fresh forward passes.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Vec::with_capacity(n_nodes);
        for (idx, node) in self.nodes.iter().enumerate() {
            let g = match grads[idx].take() {
                Some(g) => Some(g),
                // requires_grad leaves unreachable from the loss still get a
                // zero gradient of matching shape.
                None if node.requires_grad => Some(vec![0.0; node.value.numel()]),
                None => None,
            };
            out.push(g.map(|g| {
                Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape matches value")
            }));
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], id: TensorId, contrib: Vec<f64>| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |id: TensorId| self.nodes[id.0].value.data();
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (val(*a).len() / self.nodes[b.0].value.rows(), 0);
                let _ = (m, k);
                let ash = self.nodes[a.0].value.shape();
                let bsh = self.nodes[b.0].value.shape();
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                // dA = g · Bᵀ
                let bdat = val(*b);
                let mut bt = vec![0.0; k * n];
                for i in 0..k {
                    for j in 0..n {
                        bt[j * k + i] = bdat[i * n + j];
                    }
                }
                let da = matmul_raw(g, &bt, m, n, k);
                // dB = Aᵀ · g
                let adat = val(*a);
                let mut at = vec![0.0; k * m];
                for i in 0..m {
                    for j in 0..k {
                        at[j * m + i] = adat[i * k + j];
                    }
                }
                let db = matmul_raw(&at, g, k, m, n);
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Op::Transpose { a } => {
                let ash = self.nodes[a.0].value.shape();
                let (m, n) = (ash[0], ash[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                add_into(grads, *a, da);
            }
            Op::Add { a, b } => {
                add_into(grads, *a, g.to_vec());
                add_into(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                add_into(grads, *a, g.to_vec());
                add_into(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Op::AffineConst { a, alpha, .. } => {
                add_into(grads, *a, g.iter().map(|&x| alpha * x).collect());
            }
            Op::MulScalar { a, s } => {
                let sv = val(*s)[0];
                add_into(grads, *a, g.iter().map(|&x| x * sv).collect());
                let ds: f64 = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).sum();
                add_into(grads, *s, vec![ds]);
            }
            Op::AddRowBroadcast { a, bias } => {
                add_into(grads, *a, g.to_vec());
                let n = self.nodes[bias.0].value.numel();
                let mut db = vec![0.0; n];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                add_into(grads, *bias, db);
            }
            Op::Sigmoid { a } => {
                let out = &node.value;
                let da: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                add_into(grads, *a, da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                add_into(grads, *a, da);
            }
            Op::SoftmaxRows { a, .. } => {
                // dx_i = s_i * (g_i - Σ_j g_j s_j); masked entries have s = 0.
                let s = node.value.data();
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[i * n + j] * s[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = s[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                add_into(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x);
                let gv = val(*gamma);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let nf = n as f64;
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(gv).map(|(&go, &ga)| go * ga).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dx[i * n + j] =
                            inv / nf * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                add_into(grads, *x, dx);
                add_into(grads, *gamma, dgamma);
                add_into(grads, *beta, dbeta);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    add_into(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let mut dp = vec![0.0; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    add_into(grads, p, dp);
                    off += w;
                }
            }
            Op::SliceRows { a, start } => {
                let ash = self.nodes[a.0].value.shape();
                let (m, n) = (ash[0], ash[1]);
                let mut da = vec![0.0; m * n];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                add_into(grads, *a, da);
            }
            Op::SliceCols { a, start } => {
                let ash = self.nodes[a.0].value.shape();
                let (m, n) = (ash[0], ash[1]);
                let w = node.value.shape()[1];
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                add_into(grads, *a, da);
            }
            Op::MeanRows { a } => {
                let ash = self.nodes[a.0].value.shape();
                let (m, n) = (ash[0], ash[1]);
                let mf = m as f64;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / mf;
                    }
                }
                add_into(grads, *a, da);
            }
            Op::SumAll { a } => {
                let len = self.nodes[a.0].value.numel();
                add_into(grads, *a, vec![g[0]; len]);
            }
            Op::CrossEntropy { logits, target } => {
                // d/dx = softmax(x) - onehot(target)
                let src = val(*logits);
                let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = src.iter().map(|&x| (x - mx).exp()).sum();
                let mut dl: Vec<f64> = src
                    .iter()
                    .map(|&x| g[0] * (x - mx).exp() / denom)
                    .collect();
                dl[*target] -= g[0];
                add_into(grads, *logits, dl);
            }
        }
    }
}
