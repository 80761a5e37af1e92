//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node to the [`Tape`]; a node's inputs always
//! precede it, so a single reverse sweep over the node list is a valid
//! topological order. Leaves accumulate gradients across `backward` calls
//! until [`Tape::zero_grad`] is called.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive mask sentinel for forbidden attention pairs.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Constant of the tanh GELU approximation, `sqrt(2 / pi)`.
pub const GELU_C: f64 = 0.7978845608028654;
const GELU_CUBIC: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Mul,
    Scale,
    Sum,
    Transpose,
    Gelu,
    Relu,
    LayerNorm,
    SoftmaxMasked,
    GatherRows,
    RepeatRow,
    ConcatRows,
    SliceCols,
    ConcatCols,
    CrossEntropy,
    BceWithLogits,
    Cosine,
}

/// Classification target for [`Tape::cross_entropy`].
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Probs(Vec<f64>),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Transpose(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxMasked(Var),
    GatherRows { src: Var, ids: Vec<Option<usize>> },
    RepeatRow { src: Var, n: usize },
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<f64> },
    BceWithLogits { logit: Var, label: f64 },
    Cosine { a: Var, b: Var, norm_a: f64, norm_b: f64, cos: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Relu(..) => OpKind::Relu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxMasked(..) => OpKind::SoftmaxMasked,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::RepeatRow { .. } => OpKind::RepeatRow,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::Cosine { .. } => OpKind::Cosine,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Sum(x) | Op::Transpose(x) | Op::Gelu(x) | Op::Relu(x) | Op::SoftmaxMasked(x) => {
                vec![*x]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { src, .. } | Op::RepeatRow { src, .. } | Op::SliceCols { src, .. } => {
                vec![*src]
            }
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::BceWithLogits { logit, .. } => vec![*logit],
            Op::Cosine { a, b, .. } => vec![*a, *b],
        }
    }
}

/// Forward values plus the recorded operations needed to differentiate them.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    fault: Option<(OpKind, f64)>,
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape { op, left: t.shape().to_vec(), right: vec![] });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// `out[m,n] += a[m,k] * b[k,n]`; zero entries of `a` are skipped so that
/// masked attention weights never read the corresponding value rows.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.leaf_grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Records a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.ops[v.0].kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.ops[v.0].inputs()
    }

    /// Accumulated gradient of a leaf, if any `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Scales the backward contribution of every node of `kind` by `factor`.
    /// Only exists to build negative controls for gradient checking.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "add_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.value(x).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x)))
    }

    /// Tanh-approximated GELU:
    /// `0.5 * x * (1 + tanh(0.7978845608028654 * (x + 0.044715 * x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::Gelu(x))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::Relu(x))
    }

    /// Normalizes each row over its last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.value(x).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Row-wise softmax of `logits + mask`, where `mask` holds only `0` and
    /// [`NEG_INF`]. Masked entries come out as exactly `0.0`, and the row
    /// maximum is taken over unmasked entries only.
    pub fn softmax_masked(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != mask.shape() {
            return Err(Error::Shape { op: "softmax_masked", left: t.shape().to_vec(), right: mask.shape().to_vec() });
        }
        let (rows, n) = t.as_matrix();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let x = &t.data()[r * n..(r + 1) * n];
            let m = &mask.data()[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (&xv, &mv) in x.iter().zip(m) {
                if mv == 0.0 {
                    max = max.max(xv);
                } else if mv != NEG_INF {
                    return Err(Error::InvalidInput(format!("mask entries must be 0 or NEG_INF, found {mv}")));
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if m[j] == 0.0 {
                    o[j] = (x[j] - max).exp();
                    total += o[j];
                }
            }
            for j in 0..n {
                if m[j] == 0.0 {
                    o[j] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::SoftmaxMasked(logits)))
    }

    /// Selects rows of a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, src: Var, ids: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.value(src), "gather_rows")?;
        let data = self.value(src).data();
        let mut out = vec![0.0; ids.len() * cols];
        for (i, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= rows {
                    return Err(Error::TokenOutOfRange { id, vocab: rows });
                }
                out[i * cols..(i + 1) * cols].copy_from_slice(&data[id * cols..(id + 1) * cols]);
            }
        }
        let out = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(out, Op::GatherRows { src, ids: ids.to_vec() }))
    }

    /// Stacks `n` copies of a `[d]` vector into an `[n, d]` matrix.
    pub fn repeat_row(&mut self, src: Var, n: usize) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 1 {
            return Err(Error::Shape { op: "repeat_row", left: t.shape().to_vec(), right: vec![] });
        }
        let d = t.len();
        let data = t.data().repeat(n);
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::RepeatRow { src, n }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).as_matrix().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.value(src), "slice_cols")?;
        if start + len > cols || len == 0 {
            return Err(Error::Shape { op: "slice_cols", left: vec![rows, cols], right: vec![start, len] });
        }
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&data[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { src, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).as_matrix().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean over rows of `-sum(target * log_softmax(logits))`, evaluated in
    /// log-space. `logits` is `[n]` (one row) or `[m, n]` with one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Target]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, n) = t.as_matrix();
        if targets.len() != rows {
            return Err(Error::InvalidTarget(format!("{} targets for {rows} logit rows", targets.len())));
        }
        let mut dense = vec![0.0; rows * n];
        for (r, target) in targets.iter().enumerate() {
            let row = &mut dense[r * n..(r + 1) * n];
            match target {
                Target::Class(c) if *c < n => row[*c] = 1.0,
                Target::Class(c) => {
                    return Err(Error::InvalidTarget(format!("class {c} out of range for {n} classes")))
                }
                Target::Probs(p) => {
                    if p.len() != n {
                        return Err(Error::InvalidTarget(format!(
                            "probability target of length {} for {n} classes",
                            p.len()
                        )));
                    }
                    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                        return Err(Error::InvalidTarget("probability target must be nonnegative and sum to 1".into()));
                    }
                    row.copy_from_slice(p);
                }
            }
        }
        let mut probs = vec![0.0; rows * n];
        let mut loss = 0.0;
        for r in 0..rows {
            let z = &t.data()[r * n..(r + 1) * n];
            let (arg, max) =
                z.iter()
                    .cloned()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, (j, v)| if v > a.1 { (j, v) } else { a });
            // ln_1p over the non-max terms keeps small losses accurate
            let rest: f64 = z.iter().enumerate().filter(|&(j, _)| j != arg).map(|(_, v)| (v - max).exp()).sum();
            let log_norm = rest.ln_1p();
            let mut row_loss = 0.0;
            for j in 0..n {
                let log_p = (z[j] - max) - log_norm;
                probs[r * n + j] = log_p.exp();
                let tj = dense[r * n + j];
                if tj != 0.0 {
                    row_loss -= tj * log_p;
                }
            }
            loss += row_loss;
        }
        loss /= rows as f64;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, targets: dense }))
    }

    /// Binary cross-entropy on a single logit, in the overflow-free form
    /// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Result<Var> {
        let t = self.value(logit);
        if !t.is_scalar() {
            return Err(Error::Shape { op: "bce_with_logits", left: t.shape().to_vec(), right: vec![] });
        }
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::InvalidTarget(format!("binary label {label}")));
        }
        let z = t.item();
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logit, label }))
    }

    /// `a . b / (|a| |b|)` over flattened tensors of equal size.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Shape {
                op: "cosine_similarity",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let norm_a = ta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_b = tb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let cos = (dot / (norm_a * norm_b)).clamp(-1.0, 1.0);
        Ok(self.push(Tensor::scalar(cos), Op::Cosine { a, b, norm_a, norm_b, cos }))
    }

    /// Propagates `d loss / d node` to every leaf reachable from `loss`,
    /// adding into the leaves' accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.ops[i];
            let factor = match self.fault {
                Some((kind, f)) if kind == op.kind() => f,
                _ => 1.0,
            };
            let send = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, contrib: Vec<f64>| {
                let contrib = if factor != 1.0 { contrib.into_iter().map(|c| c * factor).collect() } else { contrib };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let values = &self.values;
            match op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (m, k) = values[a.0].as_matrix();
                    let n = values[b.0].as_matrix().1;
                    let (av, bv) = (values[a.0].data(), values[b.0].data());
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = av[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let gb_row = &mut gb[p * n..(p + 1) * n];
                            gb_row.iter_mut().zip(g_row).for_each(|(o, gv)| *o += av * gv);
                        }
                    }
                    let (a, b) = (*a, *b);
                    send(&mut grads, a, ga);
                    send(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    send(&mut grads, a, g.clone());
                    send(&mut grads, b, g);
                }
                Op::AddBias(x, bias) => {
                    let n = values[bias.0].len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    let (x, bias) = (*x, *bias);
                    send(&mut grads, x, g);
                    send(&mut grads, bias, gb);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(values[b.0].data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(values[a.0].data()).map(|(x, y)| x * y).collect();
                    let (a, b) = (*a, *b);
                    send(&mut grads, a, ga);
                    send(&mut grads, b, gb);
                }
                Op::Scale(x, f) => {
                    let gx = g.iter().map(|v| v * f).collect();
                    let x = *x;
                    send(&mut grads, x, gx);
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; values[x.0].len()];
                    let x = *x;
                    send(&mut grads, x, gx);
                }
                Op::Transpose(x) => {
                    let (m, n) = values[x.0].as_matrix();
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = g[j * m + i];
                        }
                    }
                    let x = *x;
                    send(&mut grads, x, gx);
                }
                Op::Gelu(x) => {
                    let gx = g.iter().zip(values[x.0].data()).map(|(gv, &xv)| gv * gelu_grad_scalar(xv)).collect();
                    let x = *x;
                    send(&mut grads, x, gx);
                }
                Op::Relu(x) => {
                    let gx =
                        g.iter().zip(values[x.0].data()).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                    let x = *x;
                    send(&mut grads, x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = values[gain.0].len();
                    let gv = values[gain.0].data();
                    let rows = inv_std.len();
                    let mut gx = vec![0.0; rows * d];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_h = 0.0;
                        for j in 0..d {
                            let dy = gr[j] * gv[j];
                            sum_dy += dy;
                            sum_dy_h += dy * hr[j];
                            ggain[j] += gr[j] * hr[j];
                            gbias[j] += gr[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dy = gr[j] * gv[j];
                            gx[r * d + j] = scale * (d as f64 * dy - sum_dy - hr[j] * sum_dy_h);
                        }
                    }
                    let (x, gain, bias) = (*x, *gain, *bias);
                    send(&mut grads, x, gx);
                    send(&mut grads, gain, ggain);
                    send(&mut grads, bias, gbias);
                }
                Op::SoftmaxMasked(x) => {
                    let y = values[i].data();
                    let (rows, n) = values[i].as_matrix();
                    let mut gx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let x = *x;
                    send(&mut grads, x, gx);
                }
                Op::GatherRows { src, ids } => {
                    let cols = values[src.0].as_matrix().1;
                    let mut gs = vec![0.0; values[src.0].len()];
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            let dst = &mut gs[id * cols..(id + 1) * cols];
                            dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(o, v)| *o += v);
                        }
                    }
                    let src = *src;
                    send(&mut grads, src, gs);
                }
                Op::RepeatRow { src, n } => {
                    let d = values[src.0].len();
                    let mut gs = vec![0.0; d];
                    for row in g.chunks(d).take(*n) {
                        gs.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    let src = *src;
                    send(&mut grads, src, gs);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let len = values[p.0].len();
                        send(&mut grads, p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let (rows, cols) = values[src.0].as_matrix();
                    let mut gs = vec![0.0; rows * cols];
                    for r in 0..rows {
                        gs[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    let src = *src;
                    send(&mut grads, src, gs);
                }
                Op::ConcatCols(parts) => {
                    let rows = values[i].as_matrix().0;
                    let total = values[i].as_matrix().1;
                    let mut offset = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let w = values[p.0].as_matrix().1;
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::CrossEntropy { logits, probs, targets } => {
                    let rows = values[logits.0].as_matrix().0 as f64;
                    let gx = probs.iter().zip(targets).map(|(p, t)| g[0] * (p - t) / rows).collect();
                    let logits = *logits;
                    send(&mut grads, logits, gx);
                }
                Op::BceWithLogits { logit, label } => {
                    let z = values[logit.0].item();
                    let sigmoid = if z >= 0.0 {
                        1.0 / (1.0 + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (1.0 + e)
                    };
                    let gx = vec![g[0] * (sigmoid - label)];
                    let logit = *logit;
                    send(&mut grads, logit, gx);
                }
                Op::Cosine { a, b, norm_a, norm_b, cos } => {
                    let (av, bv) = (values[a.0].data(), values[b.0].data());
                    let ab = norm_a * norm_b;
                    let ga = av.iter().zip(bv).map(|(x, y)| g[0] * (y / ab - cos * x / (norm_a * norm_a))).collect();
                    let gb = av.iter().zip(bv).map(|(x, y)| g[0] * (x / ab - cos * y / (norm_b * norm_b))).collect();
                    let (a, b) = (*a, *b);
                    send(&mut grads, a, ga);
                    send(&mut grads, b, gb);
                }
            }
        }
        Ok(())
    }
}
