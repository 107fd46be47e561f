//! Learnable queries that read the scene: `Q' = F(Q, F_s)`.
//!
//! Superpoint features are mapped to the query width by a linear adapter and
//! serve as the cross-attention memory. No positional code is attached to
//! them, so the output does not depend on superpoint order.

use r3d_tensor::{Linear, ParamId, ParamStore, Tape, Var};
use rand::Rng;

use crate::blocks::{AttentionSublayer, FeedForwardSublayer};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct InteractorBlock {
    pub self_attn: AttentionSublayer,
    pub cross_attn: AttentionSublayer,
    pub ffn: FeedForwardSublayer,
}

#[derive(Clone, Debug)]
pub struct Interactor {
    /// `K×d` learnable queries.
    pub queries: ParamId,
    pub adapter: Linear,
    pub blocks: Vec<InteractorBlock>,
    pub num_queries: usize,
    pub width: usize,
}

impl Interactor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        feature_dim: usize,
        width: usize,
        num_queries: usize,
        num_blocks: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_queries == 0 {
            return Err(Error::Config("the interactor needs at least one query".into()));
        }
        let queries = store.normal("interactor.queries", &[num_queries, width], 1.0, rng)?;
        let adapter = Linear::new(store, "interactor.adapter", feature_dim, width, rng)?;
        let blocks = (0..num_blocks)
            .map(|b| {
                let name = format!("interactor.block{b}");
                Ok(InteractorBlock {
                    self_attn: AttentionSublayer::new(store, &format!("{name}.self"), width, heads, rng)?,
                    cross_attn: AttentionSublayer::new(store, &format!("{name}.cross"), width, heads, rng)?,
                    ffn: FeedForwardSublayer::new(store, &format!("{name}.ffn"), width, mlp_hidden, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            adapter,
            blocks,
            num_queries,
            width,
        })
    }

    /// `feats` is `M×C`; returns the `K×d` output queries.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> Result<Var> {
        let shape = tape.value(feats).shape();
        if shape.len() != 2 || shape[1] != self.adapter.d_in {
            return Err(Error::Invalid(format!(
                "interactor expects M×{} features, got {shape:?}",
                self.adapter.d_in
            )));
        }
        let memory = self.adapter.forward(tape, store, feats)?;
        let mut q = tape.param(store, self.queries);
        for block in &self.blocks {
            q = block.self_attn.forward(tape, store, q, None, false)?;
            q = block.cross_attn.forward(tape, store, q, Some(memory), false)?;
            q = block.ffn.forward(tape, store, q)?;
        }
        Ok(q)
    }

    /// Zeroes every residual branch output, making the module return its queries.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            b.self_attn.zero_output(store);
            b.cross_attn.zero_output(store);
            b.ffn.zero_output(store);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.queries, self.adapter.weight, self.adapter.bias];
        for b in &self.blocks {
            ids.extend(b.self_attn.params());
            ids.extend(b.cross_attn.params());
            ids.extend(b.ffn.params());
        }
        ids
    }
}
