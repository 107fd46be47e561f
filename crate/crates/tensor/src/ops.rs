//! Pure forward ops over [`Tensor`] values.
//!
//! These never record anything; the [`crate::Tape`] calls into the same
//! kernels and adds the backward rules.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a[p * m..(p + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place max-subtracted softmax of one slice; `valid` limits the support
/// to the first `valid` entries and zeroes the rest.
pub(crate) fn softmax_slice(row: &mut [f64], valid: usize) {
    let max = row[..valid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v /= sum;
    }
    for v in &mut row[valid..] {
        *v = 0.0;
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.expect_rank(op, 2)?;
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    mm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::checked("matmul", vec![m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul_nt", a)?;
    let (n, k2) = matrix_dims("matmul_nt", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    mm_nt_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::checked("matmul_nt", vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("transpose", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_same_shape("add", b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::checked("add", a.shape().to_vec(), out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_same_shape("mul", b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::checked("mul", a.shape().to_vec(), out)
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    Tensor::checked("scale", a.shape().to_vec(), a.data().iter().map(|v| v * s).collect())
}

/// Adds a bias vector along the last axis; the only broadcast supported.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    if bias.numel() != c {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Tensor::checked("add_bias", x.shape().to_vec(), out)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(TensorError::Invalid(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = out[base + j * inner];
            }
            softmax_slice(&mut lane, n);
            for (j, l) in lane.iter().enumerate() {
                out[base + j * inner] = *l;
            }
        }
    }
    Tensor::checked("softmax", x.shape().to_vec(), out)
}

/// Row softmax where row `i` only sees columns `0..=i`.
pub fn causal_softmax(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = matrix_dims("causal_softmax", x)?;
    let mut out = x.data().to_vec();
    for (i, row) in out.chunks_mut(cols).enumerate().take(rows) {
        softmax_slice(row, (i + 1).min(cols));
    }
    Tensor::checked("causal_softmax", x.shape().to_vec(), out)
}

/// Per-row normalization over the last axis followed by `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gain.numel() != c || bias.numel() != c {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; x.numel()];
    for (row, o) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let (mean, rstd) = row_moments(row, eps);
        for j in 0..c {
            o[j] = (row[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::checked("layer_norm", x.shape().to_vec(), out)
}

/// Mean and reciprocal standard deviation of one row. A zero-variance row
/// with `eps == 0` yields `rstd = 0`, mapping the row to the bias.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    let rstd = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, rstd)
}

/// `x · W + b` over the last axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d_in = x.last_dim();
    let (wi, d_out) = matrix_dims("linear", w)?;
    if wi != d_in {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * d_out];
    mm_acc(x.data(), w.data(), &mut out, rows, d_in, d_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty") = d_out;
    add_bias(&Tensor::checked("linear", shape, out)?, b)
}

/// Weights of one multi-head attention block. Projections are `d×d`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Scaled dot-product attention with `heads` heads and an output projection.
///
/// With `causal`, query row `i` attends only to key rows `0..=i`.
pub fn multihead_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    w: &AttentionWeights,
    causal: bool,
) -> Result<Tensor> {
    let (_, d) = matrix_dims("multihead_attention", q)?;
    let (lk, dk) = matrix_dims("multihead_attention", k)?;
    if dk != d || v.shape() != k.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "multihead_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Invalid(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let qp = linear(q, &w.wq, &w.bq)?;
    let kp = linear(k, &w.wk, &w.bk)?;
    let vp = linear(v, &w.wv, &w.bv)?;
    let dh = d / heads;
    let lq = q.shape()[0];
    let scale_factor = 1.0 / (dh as f64).sqrt();
    let mut merged = vec![0.0; lq * d];
    for h in 0..heads {
        let cols = |t: &Tensor, rows: usize| -> Tensor {
            let mut out = Vec::with_capacity(rows * dh);
            for r in 0..rows {
                out.extend_from_slice(&t.row(r)[h * dh..(h + 1) * dh]);
            }
            Tensor::from_parts(vec![rows, dh], out)
        };
        let (qh, kh, vh) = (cols(&qp, lq), cols(&kp, lk), cols(&vp, lk));
        let scores = scale(&matmul_nt(&qh, &kh)?, scale_factor)?;
        let attn = if causal {
            causal_softmax(&scores)?
        } else {
            softmax(&scores, 1)?
        };
        let oh = matmul(&attn, &vh)?;
        for r in 0..lq {
            merged[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(oh.row(r));
        }
    }
    linear(&Tensor::from_parts(vec![lq, d], merged), &w.wo, &w.bo)
}
