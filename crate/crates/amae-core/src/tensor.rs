//! Reverse-mode automatic differentiation on a flat tape.
//!
//! [`Tensor`] is a plain (shape, row-major f64 data) value. A [`Tape`]
//! records operations as they execute; node ids are indices into the tape,
//! so inputs always precede consumers and the tape is a topological order
//! by construction. [`Tape::backward`] walks it once in reverse.
//!
//! Gradient buffers are only ever allocated for nodes that require
//! gradients, so freezing a parameter set is structural: bind it with
//! [`Tape::constant`] and no gradient storage exists for it at all.
//!
//! Everything is float64. Shapes are mostly 2-D; the last axis is the
//! feature axis for softmax/layernorm, and elementwise ops broadcast a
//! single leading dim of extent 1 (a row against a matrix) — nothing
//! richer.

use crate::error::{Error, Result};

/// Dense row-major f64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has no axes")
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        if self.cols() == 0 {
            0
        } else {
            self.numel() / self.cols()
        }
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Elementwise { a: usize, b: usize, kind: ElementwiseKind },
    Scale { x: usize, c: f64 },
    Gelu { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterRows { x: usize, idx: Vec<usize>, fill: usize },
    MeanRows { x: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    MaskedMse { a: usize, b: usize, mask: Vec<bool>, count: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient buffers produced by one backward pass, indexed by node id.
pub struct Gradients {
    buffers: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root w.r.t. node `id`, if the node
    /// required gradients.
    pub fn of(&self, id: NodeId) -> Option<&[f64]> {
        self.buffers[id.0].as_deref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.buffers[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// c += a @ b for row-major slices.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

// c += a @ b^T, with b stored row-major as [n x k].
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

// c += a^T @ b, with a stored row-major as [m x k] (so c is [k x n]).
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf that never receives a gradient buffer.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; the tape copies the current parameter value.
    pub fn param(&mut self, value: &Tensor) -> NodeId {
        self.push(value.clone(), Op::Leaf, true)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape, tb.shape),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(&ta.data, &tb.data, m, k, n, &mut out);
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out),
            Op::MatMul { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", t.shape),
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(Tensor::from_vec(vec![c, r], out), Op::Transpose { x: x.0 }, rg))
    }

    pub fn elementwise(&mut self, a: NodeId, b: NodeId, kind: ElementwiseKind) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let compatible = ta.shape == tb.shape
            || (ta.cols() == tb.cols() && (ta.rows() == 1 || tb.rows() == 1));
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                detail: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let cols = ta.cols();
        let rows = ta.rows().max(tb.rows());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let ra = if ta.rows() == 1 { 0 } else { r };
            let rb = if tb.rows() == 1 { 0 } else { r };
            for c in 0..cols {
                let x = ta.data[ra * cols + c];
                let y = tb.data[rb * cols + c];
                out.push(match kind {
                    ElementwiseKind::Add => x + y,
                    ElementwiseKind::Sub => x - y,
                    ElementwiseKind::Mul => x * y,
                });
            }
        }
        let shape = if ta.rows() >= tb.rows() {
            ta.shape.clone()
        } else {
            tb.shape.clone()
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::Elementwise { a: a.0, b: b.0, kind },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElementwiseKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = &self.nodes[x.0].value;
        let out = Tensor::from_vec(t.shape.clone(), t.data.iter().map(|v| v * c).collect());
        let rg = self.needs_grad(&[x.0]);
        self.push(out, Op::Scale { x: x.0, c }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let out = Tensor::from_vec(t.shape.clone(), t.data.iter().map(|&v| gelu_scalar(v)).collect());
        let rg = self.needs_grad(&[x.0]);
        self.push(out, Op::Gelu { x: x.0 }, rg)
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let cols = t.cols();
        let mut out = t.data.clone();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.needs_grad(&[x.0]);
        self.push(
            Tensor::from_vec(t.shape.clone(), out),
            Op::Softmax { x: x.0 },
            rg,
        )
    }

    /// Layer normalization over the last axis followed by the affine
    /// transform gamma * x_hat + beta.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        assert!(eps > 0.0, "layernorm eps must be positive");
        let d = self.nodes[x.0].value.cols();
        if self.nodes[gamma.0].value.numel() != d || self.nodes[beta.0].value.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                detail: format!(
                    "features {d}, gamma {}, beta {}",
                    self.nodes[gamma.0].value.numel(),
                    self.nodes[beta.0].value.numel()
                ),
            });
        }
        let t = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mean) * inv_std * g[j] + b[j]);
            }
        }
        let rg = self.needs_grad(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::from_vec(t.shape.clone(), out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            rg,
        ))
    }

    /// Select rows of a [T x d] tensor by index.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        let (rows, cols) = (t.rows(), t.cols());
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
        }
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(
            Tensor::from_vec(vec![idx.len(), cols], out),
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Inverse of gather: place row i of `x` at position idx[i] of a
    /// [out_rows x d] output and put `fill` (a [1 x d] vector) everywhere
    /// else. Gradients flow into both `x` and `fill`.
    pub fn scatter_rows(
        &mut self,
        x: NodeId,
        idx: &[usize],
        fill: NodeId,
        out_rows: usize,
    ) -> Result<NodeId> {
        let cols = self.nodes[x.0].value.cols();
        let x_rows = self.nodes[x.0].value.rows();
        if idx.len() != x_rows {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                detail: format!("{} indices for {} rows", idx.len(), x_rows),
            });
        }
        if self.nodes[fill.0].value.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                detail: format!(
                    "fill has {} values, need {cols}",
                    self.nodes[fill.0].value.numel()
                ),
            });
        }
        let mut seen = vec![false; out_rows];
        for &i in idx {
            if i >= out_rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: out_rows,
                });
            }
            if seen[i] {
                return Err(Error::ShapeMismatch {
                    op: "scatter_rows",
                    detail: format!("duplicate row index {i}"),
                });
            }
            seen[i] = true;
        }
        let xt = &self.nodes[x.0].value;
        let fillv = &self.nodes[fill.0].value.data;
        let mut out = Vec::with_capacity(out_rows * cols);
        for r in 0..out_rows {
            out.extend_from_slice(fillv);
            let _ = r;
        }
        for (i, &dst) in idx.iter().enumerate() {
            out[dst * cols..(dst + 1) * cols].copy_from_slice(&xt.data[i * cols..(i + 1) * cols]);
        }
        let rg = self.needs_grad(&[x.0, fill.0]);
        Ok(self.push(
            Tensor::from_vec(vec![out_rows, cols], out),
            Op::ScatterRows {
                x: x.0,
                idx: idx.to_vec(),
                fill: fill.0,
            },
            rg,
        ))
    }

    /// Mean over rows: [T x d] -> [1 x d].
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let (rows, cols) = (t.rows(), t.cols());
        assert!(rows > 0, "mean_rows on empty tensor");
        let mut out = vec![0.0; cols];
        for row in t.data.chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        let rg = self.needs_grad(&[x.0]);
        self.push(
            Tensor::from_vec(vec![1, cols], out),
            Op::MeanRows { x: x.0 },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("cols {} vs {}", t.cols(), cols),
                });
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(
            Tensor::from_vec(vec![rows, cols], data),
            Op::ConcatRows { parts: ids },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("rows {} vs {}", t.rows(), rows),
                });
            }
            total_cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.cols();
                data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(
            Tensor::from_vec(vec![rows, total_cols], data),
            Op::ConcatCols { parts: ids },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        let (rows, cols) = (t.rows(), t.cols());
        if start + len > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("range {start}..{} of {cols} cols", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data[r * cols + start..r * cols + start + len]);
        }
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(
            Tensor::from_vec(vec![rows, len], data),
            Op::SliceCols { x: x.0, start, len },
            rg,
        ))
    }

    /// Mean squared error over the true elements of `mask` only.
    pub fn masked_mse(&mut self, a: NodeId, b: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape || mask.len() != ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_mse",
                detail: format!(
                    "{:?} vs {:?}, mask {}",
                    ta.shape,
                    tb.shape,
                    mask.len()
                ),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut sum = 0.0;
        for i in 0..mask.len() {
            if mask[i] {
                let d = ta.data[i] - tb.data[i];
                sum += d * d;
            }
        }
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            Tensor::scalar(sum / count as f64),
            Op::MaskedMse {
                a: a.0,
                b: b.0,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[logits.0].value;
        let (rows, cols) = (t.rows(), t.cols());
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} labels for {rows} rows", labels.len()),
            });
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::IndexOutOfRange { index: l, len: cols });
            }
        }
        let mut total = 0.0;
        for (r, row) in t.data.chunks(cols).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += log_sum - row[labels[r]];
        }
        let rg = self.needs_grad(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from `root` (normally the scalar loss). Returns the
    /// gradient buffers; only nodes with `requires_grad` have one.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        for _ in &self.nodes {
            grads.push(None);
        }
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { buffers: grads }
    }

    fn acc<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Vec<f64>>], id: usize, add: F) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let buf = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.numel()]);
        add(buf);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].value.shape[0], self.nodes[*a].value.shape[1]);
                let n = self.nodes[*b].value.shape[1];
                let a_data = &self.nodes[*a].value.data;
                let b_data = &self.nodes[*b].value.data;
                // dA += g @ B^T, dB += A^T @ g
                self.acc(grads, *a, |da| matmul_nt_acc(g, b_data, m, n, k, da));
                self.acc(grads, *b, |db| matmul_tn_acc(a_data, g, m, k, n, db));
            }

            Op::Transpose { x } => {
                let (r, c) = (
                    self.nodes[*x].value.shape[0],
                    self.nodes[*x].value.shape[1],
                );
                self.acc(grads, *x, |dx| {
                    for ii in 0..c {
                        for jj in 0..r {
                            dx[jj * c + ii] += g[ii * r + jj];
                        }
                    }
                });
            }

            Op::Elementwise { a, b, kind } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let cols = ta.cols();
                let rows = ta.rows().max(tb.rows());
                let (a_bcast, b_bcast) = (ta.rows() == 1 && rows > 1, tb.rows() == 1 && rows > 1);
                let kind = *kind;
                self.acc(grads, *a, |da| {
                    for r in 0..rows {
                        let ra = if a_bcast { 0 } else { r };
                        let rb = if tb.rows() == 1 { 0 } else { r };
                        for c in 0..cols {
                            let gv = g[r * cols + c];
                            da[ra * cols + c] += match kind {
                                ElementwiseKind::Add | ElementwiseKind::Sub => gv,
                                ElementwiseKind::Mul => gv * tb.data[rb * cols + c],
                            };
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for r in 0..rows {
                        let ra = if ta.rows() == 1 { 0 } else { r };
                        let rb = if b_bcast { 0 } else { r };
                        for c in 0..cols {
                            let gv = g[r * cols + c];
                            db[rb * cols + c] += match kind {
                                ElementwiseKind::Add => gv,
                                ElementwiseKind::Sub => -gv,
                                ElementwiseKind::Mul => gv * ta.data[ra * cols + c],
                            };
                        }
                    }
                });
            }

            Op::Scale { x, c } => {
                let c = *c;
                self.acc(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }

            Op::Gelu { x } => {
                let xv = &self.nodes[*x].value.data;
                self.acc(grads, *x, |dx| {
                    for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad_scalar(v);
                    }
                });
            }

            Op::Softmax { x } => {
                let s = &self.nodes[i].value;
                let cols = s.cols();
                self.acc(grads, *x, |dx| {
                    for (r, srow) in s.data.chunks(cols).enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        for c in 0..cols {
                            dx[r * cols + c] += srow[c] * (grow[c] - dot);
                        }
                    }
                });
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let xt = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value.data;
                let d = xt.cols();
                let rows = xt.rows();
                let inv_d = 1.0 / d as f64;
                // Recompute per-row statistics rather than caching them.
                let mut stats = Vec::with_capacity(rows);
                for row in xt.data.chunks(d) {
                    let mean = row.iter().sum::<f64>() * inv_d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
                    stats.push((mean, 1.0 / (var + eps).sqrt()));
                }
                self.acc(grads, *beta, |db| {
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                });
                self.acc(grads, *gamma, |dg| {
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        for c in 0..d {
                            let xh = (xt.data[r * d + c] - mean) * inv_std;
                            dg[c] += g[r * d + c] * xh;
                        }
                    }
                });
                self.acc(grads, *x, |dx| {
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xt.data[r * d..(r + 1) * d];
                        let mut sum_gg = 0.0;
                        let mut sum_ggx = 0.0;
                        for c in 0..d {
                            let gg = grow[c] * gv[c];
                            let xh = (xrow[c] - mean) * inv_std;
                            sum_gg += gg;
                            sum_ggx += gg * xh;
                        }
                        for c in 0..d {
                            let gg = grow[c] * gv[c];
                            let xh = (xrow[c] - mean) * inv_std;
                            dx[r * d + c] +=
                                inv_std * (gg - inv_d * sum_gg - xh * inv_d * sum_ggx);
                        }
                    }
                });
            }

            Op::GatherRows { x, idx } => {
                let cols = self.nodes[*x].value.cols();
                self.acc(grads, *x, |dx| {
                    for (out_row, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[src * cols + c] += g[out_row * cols + c];
                        }
                    }
                });
            }

            Op::ScatterRows { x, idx, fill } => {
                let cols = self.nodes[*x].value.cols();
                let out_rows = self.nodes[i].value.rows();
                self.acc(grads, *x, |dx| {
                    for (in_row, &dst) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[in_row * cols + c] += g[dst * cols + c];
                        }
                    }
                });
                self.acc(grads, *fill, |df| {
                    let mut scattered = vec![false; out_rows];
                    for &dst in idx {
                        scattered[dst] = true;
                    }
                    for r in 0..out_rows {
                        if scattered[r] {
                            continue;
                        }
                        for c in 0..cols {
                            df[c] += g[r * cols + c];
                        }
                    }
                });
            }

            Op::MeanRows { x } => {
                let t = &self.nodes[*x].value;
                let (rows, cols) = (t.rows(), t.cols());
                let scale = 1.0 / rows as f64;
                self.acc(grads, *x, |dx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c] * scale;
                        }
                    }
                });
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    self.acc(grads, p, |dp| {
                        for k in 0..n {
                            dp[k] += g[offset + k];
                        }
                    });
                    offset += n;
                }
            }

            Op::ConcatCols { parts } => {
                let rows = self.nodes[parts[0]].value.rows();
                let total_cols = self.nodes[i].value.cols();
                let mut col_offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    self.acc(grads, p, |dp| {
                        for r in 0..rows {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total_cols + col_offset + j];
                            }
                        }
                    });
                    col_offset += c;
                }
            }

            Op::SliceCols { x, start, len } => {
                let cols = self.nodes[*x].value.cols();
                let rows = self.nodes[*x].value.rows();
                self.acc(grads, *x, |dx| {
                    for r in 0..rows {
                        for j in 0..*len {
                            dx[r * cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }

            Op::MaskedMse { a, b, mask, count } => {
                let ta = &self.nodes[*a].value.data;
                let tb = &self.nodes[*b].value.data;
                let scale = 2.0 * g[0] / *count as f64;
                self.acc(grads, *a, |da| {
                    for k in 0..mask.len() {
                        if mask[k] {
                            da[k] += scale * (ta[k] - tb[k]);
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for k in 0..mask.len() {
                        if mask[k] {
                            db[k] -= scale * (ta[k] - tb[k]);
                        }
                    }
                });
            }

            Op::CrossEntropy { logits, labels } => {
                let t = &self.nodes[*logits].value;
                let cols = t.cols();
                let rows = t.rows();
                let scale = g[0] / rows as f64;
                self.acc(grads, *logits, |dl| {
                    for (r, row) in t.data.chunks(cols).enumerate() {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for c in 0..cols {
                            let p = (row[c] - max).exp() / sum;
                            let target = if labels[r] == c { 1.0 } else { 0.0 };
                            dl[r * cols + c] += scale * (p - target);
                        }
                    }
                });
            }
        }
    }
}
