//! Central finite-difference checks of tape gradients.
//!
//! Errors are measured per coordinate as `|a − n| / max(|a|, |n|, floor)` where
//! `a` is the analytic and `n` the numeric derivative. The floor keeps
//! coordinates whose true derivative is zero from dividing by nothing.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error seen.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        self.max_rel_error = self.max_rel_error.max((analytic - numeric).abs() / denom);
        self.checked += 1;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
        }
    }
}

fn evaluate<F, E>(inputs: &[Tensor], f: &F) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Checks every coordinate of every input of a scalar-valued function.
pub fn check_inputs<F, E>(inputs: &[Tensor], f: F) -> std::result::Result<GradCheck, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + DEFAULT_STEP;
            let up = evaluate(&probe, &f)?;
            probe[k].data_mut()[i] = x - DEFAULT_STEP;
            let down = evaluate(&probe, &f)?;
            probe[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            report.record(analytic.data()[i], numeric, DEFAULT_FLOOR);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar loss built from `store`.
///
/// At most `per_param` coordinates of each listed parameter are sampled;
/// `None` checks them all.
pub fn check_params<F, E>(
    store: &mut ParamStore,
    ids: &[ParamId],
    per_param: Option<usize>,
    rng: &mut impl Rng,
    f: F,
) -> std::result::Result<GradCheck, E>
where
    F: Fn(&mut Tape, &ParamStore) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?.to_buffer(store);

    let scalar = |store: &ParamStore| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheck::default();
    for &id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get_or_zero(store, id);
        for i in coords {
            let x = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x + DEFAULT_STEP;
            let up = scalar(store)?;
            store.value_mut(id).data_mut()[i] = x - DEFAULT_STEP;
            let down = scalar(store)?;
            store.value_mut(id).data_mut()[i] = x;
            report.record(analytic.data()[i], (up - down) / (2.0 * DEFAULT_STEP), DEFAULT_FLOOR);
        }
    }
    Ok(report)
}

/// Reduces any value to a scalar through fixed pseudo-random weights so that
/// every output coordinate contributes a distinct slope.
pub fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let weights = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).fract() - 0.5).collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// Runs the finite-difference check on every differentiable tape op with
/// shapes drawn from `rng`. Returns one entry per op.
pub fn check_all_ops(rng: &mut impl Rng) -> Result<Vec<(&'static str, GradCheck)>> {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let a = random_tensor(rng, &[m, k]);
    let b = random_tensor(rng, &[k, n]);
    let bt = random_tensor(rng, &[n, k]);
    let a2 = random_tensor(rng, &[m, k]);
    let row = random_tensor(rng, &[k]);
    let square = random_tensor(rng, &[m, m]);
    let factor = rng.random_range(-2.0..2.0);

    let mut out = Vec::new();
    out.push(("matmul", check_inputs(&[a.clone(), b.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    })?));
    out.push(("matmul_nt", check_inputs(&[a.clone(), bt.clone()], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, y)
    })?));
    out.push(("transpose", check_inputs(&[a.clone()], |t, v| {
        let y = t.transpose(v[0])?;
        weighted_sum(t, y)
    })?));
    out.push(("add", check_inputs(&[a.clone(), a2.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y)
    })?));
    out.push(("sub", check_inputs(&[a.clone(), a2.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y)
    })?));
    out.push(("mul", check_inputs(&[a.clone(), a2.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y)
    })?));
    out.push(("scale", check_inputs(&[a.clone()], |t, v| {
        let y = t.scale(v[0], factor)?;
        weighted_sum(t, y)
    })?));
    out.push(("add_bias", check_inputs(&[a.clone(), row.clone()], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        weighted_sum(t, y)
    })?));
    let bias_n = random_tensor(rng, &[n]);
    out.push(("linear", check_inputs(&[a.clone(), b.clone(), bias_n], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weighted_sum(t, y)
    })?));
    out.push(("gelu", check_inputs(&[a.clone()], |t, v| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y)
    })?));
    out.push(("sigmoid", check_inputs(&[a.clone()], |t, v| {
        let y = t.sigmoid(v[0])?;
        weighted_sum(t, y)
    })?));
    out.push(("softmax", check_inputs(&[a.clone()], |t, v| {
        let y = t.softmax(v[0])?;
        weighted_sum(t, y)
    })?));
    out.push(("causal_softmax", check_inputs(&[square], |t, v| {
        let y = t.causal_softmax(v[0])?;
        weighted_sum(t, y)
    })?));
    let wide = random_tensor(rng, &[m, k + 1]);
    let gain_wide = random_tensor(rng, &[k + 1]);
    let bias_wide = random_tensor(rng, &[k + 1]);
    out.push(("layer_norm", check_inputs(&[wide.clone(), gain_wide, bias_wide], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y)
    })?));
    let start = rng.random_range(0..k);
    let end = rng.random_range(start + 1..=k);
    out.push(("slice_cols", check_inputs(&[a.clone()], |t, v| {
        let y = t.slice_cols(v[0], start, end)?;
        weighted_sum(t, y)
    })?));
    let side = random_tensor(rng, &[m, n]);
    out.push(("concat_cols", check_inputs(&[a.clone(), side], |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        weighted_sum(t, y)
    })?));
    let below = random_tensor(rng, &[n, k]);
    out.push(("concat_rows", check_inputs(&[a.clone(), below], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        weighted_sum(t, y)
    })?));
    let picks: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..m)).collect();
    out.push(("gather_rows", check_inputs(&[a.clone()], |t, v| {
        let y = t.gather_rows(v[0], &picks)?;
        weighted_sum(t, y)
    })?));
    let rows = m + 3;
    let segments = rng.random_range(1..=rows.min(4));
    let assignment: Vec<usize> = (0..rows).map(|i| if i < segments { i } else { rng.random_range(0..segments) }).collect();
    let grouped = random_tensor(rng, &[rows, k]);
    out.push(("segment_mean", check_inputs(&[grouped.clone()], |t, v| {
        let y = t.segment_mean(v[0], &assignment, segments)?;
        weighted_sum(t, y)
    })?));
    out.push(("segment_max", check_inputs(&[grouped], |t, v| {
        let y = t.segment_max(v[0], &assignment, segments)?;
        weighted_sum(t, y)
    })?));
    out.push(("reshape", check_inputs(&[a.clone()], |t, v| {
        let y = t.reshape(v[0], &[k, m])?;
        weighted_sum(t, y)
    })?));
    out.push(("sum", check_inputs(&[a.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    })?));
    out.push(("mean", check_inputs(&[a.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    })?));
    let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    out.push(("cross_entropy", check_inputs(&[a.clone()], |t, v| t.cross_entropy(v[0], &classes))?));
    let labels: Vec<f64> = (0..m * k).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    out.push(("bce_with_logits", check_inputs(&[a.clone()], |t, v| t.bce_with_logits(v[0], &labels))?));
    out.push(("dice", check_inputs(&[a.clone()], |t, v| t.dice(v[0], &labels, 1.0))?));

    let heads = rng.random_range(1..=2);
    let dim = 2 * heads;
    let mut store = ParamStore::new();
    let mha = crate::nn::MultiHeadAttention::new(&mut store, "attn", dim, heads, rng)?;
    let q = random_tensor(rng, &[m, dim]);
    let kv = random_tensor(rng, &[m, dim]);
    let causal = rng.random_bool(0.5);
    out.push(("multihead_attention", check_inputs(&[q.clone(), kv.clone()], |t, v| {
        let y = mha.forward(t, &store, v[0], v[1], v[1], causal)?;
        weighted_sum(t, y)
    })?));
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    out.push(("multihead_attention.params", check_params(&mut store, &ids, None, rng, |t, s| {
        let (qv, kvv) = (t.constant(q.clone()), t.constant(kv.clone()));
        let y = mha.forward(t, s, qv, kvv, kvv, causal)?;
        weighted_sum(t, y)
    })?));
    Ok(out)
}
