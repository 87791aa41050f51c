//! Tape of tensor operations and the backward sweep over it.

use crate::tensor::{Real, Tensor};
use crate::{Result, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Softmax(x) | Op::Gelu(x) => vec![*x],
            Op::LayerNorm { x, .. } | Op::SliceCols { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of primitive operations in creation order. Inputs always precede
/// the node that consumes them, so a reverse sweep is a valid topological
/// order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_parts(x: f64) -> (f64, f64) {
    let s = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = s.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    (y, dy)
}

/// Numerically stable softmax of one row into `out`, accumulating in f64.
fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    let mut sum = 0.0f64;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x.as_f64() - max).exp();
        sum += e;
        *o = T::from_f64_lossy(e);
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o = T::from_f64_lossy(o.as_f64() * inv);
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_of(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = bv.cols();
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, T::one(), av.data(), bv.data(), T::zero(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    fn check_row_vector(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.numel() != xv.cols() {
            return Err(mismatch(op, format!("{:?} with row {:?}", xv.shape(), rv.shape())));
        }
        Ok(())
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_row_vector("add_row", x, bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("add_row", value, Op::AddRow(x, bias))
    }

    /// Multiplies every row of `x` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.check_row_vector("mul_row", x, gain)?;
        let (xv, gv) = (self.value(x), self.value(gain));
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[i % c])
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("mul_row", value, Op::MulRow(x, gain))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("scale", value, Op::Scale(x, factor))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); xv.numel()];
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push("softmax", value, Op::Softmax(x))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); xv.numel()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = T::from_f64_lossy((v.as_f64() - mean) * r);
            }
            rstd.push(T::from_f64_lossy(r));
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| T::from_f64_lossy(gelu_parts(v.as_f64()).0))
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("gelu", value, Op::Gelu(x))
    }

    /// Gathers rows of a 2-D `table`: output row `i` is `table[indices[i]]`.
    pub fn embedding_gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        if indices.is_empty() {
            return Err(mismatch("embedding_gather", "no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_gather",
                    index: i,
                    size: v,
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(&[indices.len(), d], out)?;
        self.push(
            "embedding_gather",
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_cols", "no inputs".into()))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|p| self.shape_of(*p).to_vec()).collect();
            return Err(mismatch("concat_cols", format!("{shapes:?}")));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..start + len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(mismatch(
                "slice_cols",
                format!("{start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new(&[xv.rows(), len], out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start })
    }

    /// Multi-head scaled dot-product attention over consecutive groups of
    /// `seq_len` rows. `q`, `k`, `v` are `[groups * seq_len, d]` with
    /// `d % heads == 0`; every position attends to every position of its group.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape()
            || vv.shape() != qv.shape()
            || seq_len == 0
            || heads == 0
            || n % seq_len != 0
            || d % heads != 0
        {
            return Err(mismatch(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} seq_len {seq_len} heads {heads}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = n / seq_len;
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![T::zero(); groups * heads * seq_len * seq_len];
        let mut out = vec![T::zero(); n * d];
        let mut scores = vec![T::zero(); seq_len];
        for g in 0..groups {
            let base = g * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = &qd[(base + i) * d + off..(base + i) * d + off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(base + j) * d + off..(base + j) * d + off + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        *s = T::from_f64_lossy(dot * scale);
                    }
                    let p0 = ((g * heads + h) * seq_len + i) * seq_len;
                    let prow = &mut probs[p0..p0 + seq_len];
                    softmax_row(&scores, prow);
                    let orow = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for (j, &a) in prow.iter().enumerate() {
                        let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                        for (o, &vjc) in orow.iter_mut().zip(vj) {
                            *o = *o + a * vjc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(qv.shape(), out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        )
    }

    /// Weighted softmax cross-entropy from logits, summed to a scalar:
    /// `sum_b weights[b] * -log softmax(logits[b])[targets[b]]`.
    /// Rows with zero weight contribute nothing, whatever their target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, l) = (lv.rows(), lv.cols());
        if targets.len() != b || weights.len() != b {
            return Err(mismatch(
                "cross_entropy",
                format!("{b} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let mut probs = vec![T::zero(); b * l];
        let mut loss = 0.0f64;
        for (r, (row, p)) in lv.data().chunks(l).zip(probs.chunks_mut(l)).enumerate() {
            softmax_row(row, p);
            let w = weights[r].as_f64();
            if w == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= l {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: l,
                });
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
            let lse = max + row.iter().map(|&x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[t].as_f64());
        }
        let value = Tensor::scalar(T::from_f64_lossy(loss));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Elementwise product with a fixed mask (entries 0 or 1/(1-rate)).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(mismatch(
                "dropout",
                format!("mask of {} for {:?}", mask.len(), xv.shape()),
            ));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask })
    }

    /// Backpropagates from a single-element tensor.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(mismatch("backward", format!("loss shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let t = match g {
                Some(g) if node.needs_grad => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    if !t.is_finite() {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    Some(t)
                }
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, av.numel());
                    T::gemm(false, true, m, n, k, T::one(), g, bv.data(), T::one(), ga);
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, bv.numel());
                    T::gemm(true, false, k, m, n, T::one(), av.data(), g, T::one(), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grad_buf(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    accumulate(grad_buf(grads, *x, g.len()), g);
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).numel();
                    let gb = grad_buf(grads, *bias, c);
                    for row in g.chunks(c) {
                        accumulate(gb, row);
                    }
                }
            }
            Op::MulRow(x, gain) => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let c = gv.numel();
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, g.len());
                    for (i, (o, &gi)) in gx.iter_mut().zip(g).enumerate() {
                        *o = *o + gi * gv.data()[i % c];
                    }
                }
                if self.wants(*gain) {
                    let mut acc = vec![0.0f64; c];
                    for (i, (&gi, &xi)) in g.iter().zip(xv.data()).enumerate() {
                        acc[i % c] += gi.as_f64() * xi.as_f64();
                    }
                    let gg = grad_buf(grads, *gain, c);
                    for (o, a) in gg.iter_mut().zip(acc) {
                        *o = *o + T::from_f64_lossy(a);
                    }
                }
            }
            Op::Scale(x, factor) => {
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, g.len());
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi * *factor;
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let gx = grad_buf(grads, *x, g.len());
                    for ((gr, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o = *o + T::from_f64_lossy(yi.as_f64() * (gi.as_f64() - dot));
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let gx = grad_buf(grads, *x, g.len());
                    for (r, ((gr, yr), gxr)) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mean_g = gr.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
                        let mean_gy = gr
                            .iter()
                            .zip(yr)
                            .map(|(a, b)| a.as_f64() * b.as_f64())
                            .sum::<f64>()
                            / c as f64;
                        let rs = rstd[r].as_f64();
                        for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            let d = rs * (gi.as_f64() - mean_g - yi.as_f64() * mean_gy);
                            *o = *o + T::from_f64_lossy(d);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let gx = grad_buf(grads, *x, g.len());
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                        let (_, dy) = gelu_parts(xi.as_f64());
                        *o = *o + T::from_f64_lossy(gi.as_f64() * dy);
                    }
                }
            }
            Op::Gather { table, indices } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let gt = grad_buf(grads, *table, tv.numel());
                    for (r, &i) in indices.iter().enumerate() {
                        accumulate(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let c = pv.cols();
                    if self.wants(*p) {
                        let gp = grad_buf(grads, *p, pv.numel());
                        for r in 0..rows {
                            accumulate(&mut gp[r * c..(r + 1) * c], &g[r * total + start..r * total + start + c]);
                        }
                    }
                    start += c;
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let (rows, c) = (xv.rows(), xv.cols());
                    let len = node.value.cols();
                    let gx = grad_buf(grads, *x, xv.numel());
                    for r in 0..rows {
                        accumulate(&mut gx[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), *seq_len, *heads, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let l = self.value(*logits).cols();
                    let g0 = g[0].as_f64();
                    let gl = grad_buf(grads, *logits, probs.len());
                    for (r, (pr, glr)) in probs.chunks(l).zip(gl.chunks_mut(l)).enumerate() {
                        let w = weights[r].as_f64();
                        if w == 0.0 {
                            continue;
                        }
                        for (c, (o, &p)) in glr.iter_mut().zip(pr).enumerate() {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            *o = *o + T::from_f64_lossy(g0 * w * (p.as_f64() - onehot));
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, g.len());
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o = *o + gi * m;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        (q, k, v): (Var, Var, Var),
        seq_len: usize,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = n / seq_len;
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());

        let mut gq = vec![0.0f64; n * d];
        let mut gk = vec![0.0f64; n * d];
        let mut gv = vec![0.0f64; n * d];
        let mut da = vec![0.0f64; seq_len];
        for grp in 0..groups {
            let base = grp * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let p0 = ((grp * heads + h) * seq_len + i) * seq_len;
                    let prow = &probs[p0..p0 + seq_len];
                    let gi = &g[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..seq_len {
                        let vj = (base + j) * d + off;
                        let a = prow[j].as_f64();
                        let mut dot = 0.0;
                        for c in 0..dh {
                            let gic = gi[c].as_f64();
                            dot += gic * vd[vj + c].as_f64();
                            gv[vj + c] += a * gic;
                        }
                        da[j] = dot;
                    }
                    let inner: f64 = prow.iter().zip(&da).map(|(a, b)| a.as_f64() * b).sum();
                    let qi = (base + i) * d + off;
                    for j in 0..seq_len {
                        let ds = prow[j].as_f64() * (da[j] - inner) * scale;
                        let kj = (base + j) * d + off;
                        for c in 0..dh {
                            gq[qi + c] += ds * kd[kj + c].as_f64();
                            gk[kj + c] += ds * qd[qi + c].as_f64();
                        }
                    }
                }
            }
        }
        for (var, acc) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(var) {
                let buf = grad_buf(grads, var, n * d);
                for (o, a) in buf.iter_mut().zip(acc) {
                    *o = *o + T::from_f64_lossy(a);
                }
            }
        }
    }
}

fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
