//! Parameterized building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::ops::AttentionWeights;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/d_in)`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_std(store, name, d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.normal(format!("{name}.weight"), &[d_in, d_out], std, rng)?;
        let bias = store.zeros(format!("{name}.bias"), &[d_out])?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(format!("{name}.gain"), &[dim])?,
            bias: store.zeros(format!("{name}.bias"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width, input first: `[d_in, hidden.., d_out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(TensorError::Invalid("an MLP needs at least two widths".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i < last {
                x = tape.gelu(x)?;
            }
        }
        Ok(x)
    }

    pub fn output(&self) -> &Linear {
        self.layers.last().expect("an MLP has at least one layer")
    }

    pub fn d_out(&self) -> usize {
        self.output().d_out
    }
}

/// Multi-head attention with `d×d` projections for query, key, value and output.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `q: Lq×d`, `k`/`v: Lk×d` → `Lq×d`. With `causal`, row `i` sees keys `0..=i`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
    ) -> Result<Var> {
        let qp = self.query.forward(tape, store, q)?;
        let kp = self.key.forward(tape, store, k)?;
        let vp = self.value.forward(tape, store, v)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                let range = (h * dh, (h + 1) * dh);
                (
                    tape.slice_cols(qp, range.0, range.1)?,
                    tape.slice_cols(kp, range.0, range.1)?,
                    tape.slice_cols(vp, range.0, range.1)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = if causal {
                tape.causal_softmax(scores)?
            } else {
                tape.softmax(scores)?
            };
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.output.forward(tape, store, merged)
    }

    /// Snapshot of the current weights for the pure-op path.
    pub fn weights(&self, store: &ParamStore) -> AttentionWeights {
        let get = |id| store.value(id).clone();
        AttentionWeights {
            wq: get(self.query.weight),
            bq: get(self.query.bias),
            wk: get(self.key.weight),
            bk: get(self.key.bias),
            wv: get(self.value.weight),
            bv: get(self.value.bias),
            wo: get(self.output.weight),
            bo: get(self.output.bias),
        }
    }
}
