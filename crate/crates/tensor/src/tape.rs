//! Dynamic gradient tape.
//!
//! Every op evaluates eagerly and appends a node holding its output and
//! whatever the backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse once; a second call without [`Tape::reset`] is an error.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops::{self, dot, gelu_grad_scalar, mm_acc, mm_nt_acc, mm_tn_acc, sigmoid_scalar};
use crate::params::{GradBuffer, ParamId, ParamStore, Trainable};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        assignment: Vec<usize>,
        counts: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Dice {
        logits: Var,
        targets: Vec<f64>,
        smooth: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }

    /// Parameter gradients gathered into a buffer sized for `store`.
    pub fn to_buffer(&self, store: &ParamStore) -> GradBuffer {
        let mut buf = GradBuffer::for_store(store);
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                buf.add(id, g).expect("parameter gradient shape matches its value");
            }
        }
        buf
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    /// Frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.trainable == Trainable::Frozen {
            self.constant(p.value.clone())
        } else {
            self.leaf(p.value.clone())
        };
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.node(v)?.value;
        t.expect_rank(op, 2)?;
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(&self.node(a)?.value, &self.node(b)?.value)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(&self.node(a)?.value, &self.node(b)?.value)?;
        self.push("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(&self.node(x)?.value)?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(&self.node(a)?.value, &self.node(b)?.value)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        ta.expect_same_shape("sub", tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(&self.node(a)?.value, &self.node(b)?.value)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = ops::scale(&self.node(x)?.value, s)?;
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(&self.node(x)?.value, &self.node(bias)?.value)?;
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// `x · w + b` for a 2-D `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(&self.node(x)?.value);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::sigmoid(&self.node(x)?.value);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis of a 2-D value.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.dims2("softmax", x)?;
        let out = ops::softmax(&self.node(x)?.value, 1)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Row softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::causal_softmax(&self.node(x)?.value)?;
        // Masked entries are exactly zero, so the plain softmax rule applies.
        self.push("causal_softmax", out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.node(x)?.value,
            &self.node(gain)?.value,
            &self.node(bias)?.value,
        );
        let c = tx.last_dim();
        if tg.numel() != c || tb.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let (mean, rs) = ops::row_moments(row, eps);
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if start >= end || end > cols {
            return Err(TensorError::Invalid(format!(
                "column range {start}..{end} outside 0..{cols}"
            )));
        }
        let t = &self.node(x)?.value;
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::from_parts(vec![rows, end - start], out);
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], out);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let (_, cols) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows of a 2-D value picked by index (repeats allowed); embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2("gather_rows", x)?;
        if rows.is_empty() {
            return Err(TensorError::Invalid("gather of no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Invalid(format!("row {bad} outside 0..{n}")));
        }
        let t = &self.node(x)?.value;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), cols], out);
        self.push(
            "gather_rows",
            out,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    fn check_assignment(&self, op: &'static str, x: Var, assignment: &[usize], segments: usize) -> Result<Vec<usize>> {
        let (n, _) = self.dims2(op, x)?;
        if assignment.len() != n {
            return Err(TensorError::Invalid(format!(
                "{op}: {} assignments for {n} rows",
                assignment.len()
            )));
        }
        let mut counts = vec![0usize; segments];
        for &s in assignment {
            if s >= segments {
                return Err(TensorError::Invalid(format!("{op}: segment {s} outside 0..{segments}")));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(TensorError::Invalid(format!("{op}: segment {empty} is empty")));
        }
        Ok(counts)
    }

    /// Row means grouped by `assignment` into `segments` rows.
    pub fn segment_mean(&mut self, x: Var, assignment: &[usize], segments: usize) -> Result<Var> {
        let counts = self.check_assignment("segment_mean", x, assignment, segments)?;
        let t = &self.node(x)?.value;
        let cols = t.last_dim();
        let mut out = vec![0.0; segments * cols];
        for (i, &s) in assignment.iter().enumerate() {
            for (o, v) in out[s * cols..(s + 1) * cols].iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            for o in &mut out[s * cols..(s + 1) * cols] {
                *o /= c as f64;
            }
        }
        let out = Tensor::from_parts(vec![segments, cols], out);
        self.push(
            "segment_mean",
            out,
            Op::SegmentMean {
                x,
                assignment: assignment.to_vec(),
                counts,
            },
            &[x],
        )
    }

    /// Elementwise row maxima grouped by `assignment`; ties go to the lowest row.
    pub fn segment_max(&mut self, x: Var, assignment: &[usize], segments: usize) -> Result<Var> {
        self.check_assignment("segment_max", x, assignment, segments)?;
        let t = &self.node(x)?.value;
        let cols = t.last_dim();
        let mut out = vec![f64::NEG_INFINITY; segments * cols];
        let mut argmax = vec![0usize; segments * cols];
        for (i, &s) in assignment.iter().enumerate() {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v > out[s * cols + j] {
                    out[s * cols + j] = v;
                    argmax[s * cols + j] = i;
                }
            }
        }
        let out = Tensor::from_parts(vec![segments, cols], out);
        self.push("segment_max", out, Op::SegmentMax { x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean token cross-entropy of `logits[T×V]` against `targets[T]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} targets for {t} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(TensorError::Invalid(format!("target class {bad} outside 0..{v}")));
        }
        let x = &self.node(logits)?.value;
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / t as f64);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    fn check_targets(&self, op: &'static str, logits: Var, targets: &[f64]) -> Result<()> {
        let n = self.node(logits)?.value.numel();
        if targets.len() != n {
            return Err(TensorError::Invalid(format!(
                "{op}: {} targets for {n} logits",
                targets.len()
            )));
        }
        Ok(())
    }

    /// Mean binary cross-entropy with logits, computed in the stable form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.check_targets("bce_with_logits", logits, targets)?;
        let x = &self.node(logits)?.value;
        let n = x.numel() as f64;
        let loss = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// `1 − (2·Σpg + s)/(Σp + Σg + s)` with `p = sigmoid(logits)`.
    pub fn dice(&mut self, logits: Var, targets: &[f64], smooth: f64) -> Result<Var> {
        self.check_targets("dice", logits, targets)?;
        let x = &self.node(logits)?.value;
        let (mut inter, mut psum) = (0.0, 0.0);
        for (&z, &g) in x.data().iter().zip(targets) {
            let p = sigmoid_scalar(z);
            inter += p * g;
            psum += p;
        }
        let gsum: f64 = targets.iter().sum();
        let loss = 1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth);
        self.push(
            "dice",
            Tensor::scalar(loss),
            Op::Dice {
                logits,
                targets: targets.to_vec(),
                smooth,
            },
            &[logits],
        )
    }

    /// Reverse pass from a single-valued `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_node = self.node(loss)?;
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        let mut params: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Ok(Gradients {
            grads,
            params,
            shapes,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let nn = self.value(b).shape()[1];
                if self.wants(a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    mm_nt_acc(g, self.value(b).data(), da, m, nn, k);
                }
                if self.wants(b) {
                    let db = accumulate(&mut grads[b.0], k * nn);
                    mm_tn_acc(self.value(a).data(), g, db, m, k, nn);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let nn = self.value(b).shape()[0];
                if self.wants(a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    mm_acc(g, self.value(b).data(), da, m, nn, k);
                }
                if self.wants(b) {
                    let db = accumulate(&mut grads[b.0], nn * k);
                    mm_tn_acc(g, self.value(a).data(), db, m, nn, k);
                }
            }
            &Op::Transpose(x) => {
                if self.wants(x) {
                    let (r, c) = (self.value(x).shape()[0], self.value(x).shape()[1]);
                    let dx = accumulate(&mut grads[x.0], r * c);
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(accumulate(&mut grads[v.0], g.len()), g, 1.0);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_into(accumulate(&mut grads[a.0], g.len()), g, 1.0);
                }
                if self.wants(b) {
                    add_into(accumulate(&mut grads[b.0], g.len()), g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let other = self.value(b).data();
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, gv), o) in da.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
                if self.wants(b) {
                    let other = self.value(a).data();
                    let db = accumulate(&mut grads[b.0], g.len());
                    for ((d, gv), o) in db.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
            }
            &Op::Scale(x, s) => {
                if self.wants(x) {
                    add_into(accumulate(&mut grads[x.0], g.len()), g, s);
                }
            }
            &Op::AddBias(x, b) => {
                if self.wants(x) {
                    add_into(accumulate(&mut grads[x.0], g.len()), g, 1.0);
                }
                if self.wants(b) {
                    let c = self.numel(b);
                    let db = accumulate(&mut grads[b.0], c);
                    for row in g.chunks(c) {
                        add_into(db, row, 1.0);
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let xs = self.value(x).data();
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(xs) {
                        *d += gv * gelu_grad_scalar(xv);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if self.wants(x) {
                    let ys = node.value.data();
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((d, gv), &y) in dx.iter_mut().zip(g).zip(ys) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.wants(x) {
                    let c = node.value.last_dim();
                    let ys = node.value.data();
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(ys.chunks(c)) {
                        let inner = dot(grow, yrow);
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let gains = self.value(*gain).data();
                if self.wants(*gain) {
                    let dg = accumulate(&mut grads[gain.0], c);
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = accumulate(&mut grads[bias.0], c);
                    for grow in g.chunks(c) {
                        add_into(db, grow, 1.0);
                    }
                }
                if self.wants(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    let mut dh = vec![0.0; c];
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = grow[j] * gains[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dot(&dh, hrow) / c as f64;
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if self.wants(x) {
                    let cols = self.value(x).last_dim();
                    let width = node.value.last_dim();
                    let dx = accumulate(&mut grads[x.0], self.numel(x));
                    for (r, grow) in g.chunks(width).enumerate() {
                        add_into(&mut dx[r * cols + start..r * cols + start + width], grow, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).last_dim();
                    if self.wants(p) {
                        let dp = accumulate(&mut grads[p.0], self.numel(p));
                        for (r, grow) in g.chunks(total).enumerate() {
                            add_into(&mut dp[r * width..(r + 1) * width], &grow[offset..offset + width], 1.0);
                        }
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.numel(p);
                    if self.wants(p) {
                        add_into(accumulate(&mut grads[p.0], len), &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::Gather { x, rows } => {
                if self.wants(*x) {
                    let cols = node.value.last_dim();
                    let dx = accumulate(&mut grads[x.0], self.numel(*x));
                    for (grow, &r) in g.chunks(cols).zip(rows) {
                        add_into(&mut dx[r * cols..(r + 1) * cols], grow, 1.0);
                    }
                }
            }
            Op::SegmentMean {
                x,
                assignment,
                counts,
            } => {
                if self.wants(*x) {
                    let cols = node.value.last_dim();
                    let dx = accumulate(&mut grads[x.0], self.numel(*x));
                    for (i, &s) in assignment.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        add_into(&mut dx[i * cols..(i + 1) * cols], &g[s * cols..(s + 1) * cols], inv);
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                if self.wants(*x) {
                    let cols = node.value.last_dim();
                    let dx = accumulate(&mut grads[x.0], self.numel(*x));
                    for (k, &src) in argmax.iter().enumerate() {
                        dx[src * cols + k % cols] += g[k];
                    }
                }
            }
            &Op::Reshape(x) => {
                if self.wants(x) {
                    add_into(accumulate(&mut grads[x.0], g.len()), g, 1.0);
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    let n = self.numel(x);
                    accumulate(&mut grads[x.0], n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if self.wants(x) {
                    let n = self.numel(x);
                    let share = g[0] / n as f64;
                    accumulate(&mut grads[x.0], n).iter_mut().for_each(|d| *d += share);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let v = self.value(*logits).last_dim();
                    let scale = g[0] / targets.len() as f64;
                    let dx = accumulate(&mut grads[logits.0], probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dx[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.wants(*logits) {
                    let xs = self.value(*logits).data();
                    let scale = g[0] / xs.len() as f64;
                    let dx = accumulate(&mut grads[logits.0], xs.len());
                    for ((d, &z), &y) in dx.iter_mut().zip(xs).zip(targets) {
                        *d += scale * (sigmoid_scalar(z) - y);
                    }
                }
            }
            Op::Dice {
                logits,
                targets,
                smooth,
            } => {
                if self.wants(*logits) {
                    let xs = self.value(*logits).data();
                    let ps: Vec<f64> = xs.iter().map(|&z| sigmoid_scalar(z)).collect();
                    let inter: f64 = ps.iter().zip(targets).map(|(p, t)| p * t).sum();
                    let denom = ps.iter().sum::<f64>() + targets.iter().sum::<f64>() + smooth;
                    let numer = 2.0 * inter + smooth;
                    let dx = accumulate(&mut grads[logits.0], xs.len());
                    for ((d, &p), &t) in dx.iter_mut().zip(&ps).zip(targets) {
                        let dl_dp = -(2.0 * t * denom - numer) / (denom * denom);
                        *d += g[0] * dl_dp * p * (1.0 - p);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}
