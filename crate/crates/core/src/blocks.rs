//! Pre-norm residual sublayers shared by the interactor, language model and
//! mask decoders.

use r3d_tensor::{LayerNorm, Mlp, MultiHeadAttention, ParamId, ParamStore, Tape, Var};
use rand::Rng;

use crate::error::Result;

/// `x + Attn(LN(x), kv)`; attends to itself when no memory is given.
#[derive(Clone, Debug)]
pub struct AttentionSublayer {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl AttentionSublayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Option<Var>,
        causal: bool,
    ) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let kv = memory.unwrap_or(h);
        let a = self.attn.forward(tape, store, h, kv, kv, causal)?;
        Ok(tape.add(x, a)?)
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        self.attn.output.zero(store);
    }

    pub fn params(&self) -> Vec<ParamId> {
        let a = &self.attn;
        let mut ids = vec![self.norm.gain, self.norm.bias];
        for l in [&a.query, &a.key, &a.value, &a.output] {
            ids.extend([l.weight, l.bias]);
        }
        ids
    }
}

/// `x + MLP(LN(x))` with one GELU hidden layer.
#[derive(Clone, Debug)]
pub struct FeedForwardSublayer {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForwardSublayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[dim, hidden, dim], rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let h = self.mlp.forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        self.mlp.output().zero(store);
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm.gain, self.norm.bias];
        ids.extend(self.mlp.layers.iter().flat_map(|l| [l.weight, l.bias]));
        ids
    }
}
