//! A small causal transformer over `[scene queries ‖ instruction ‖ answer]`.

use r3d_tensor::{LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor, Trainable, Var};
use rand::Rng;

use super::template::TokenSequence;
use super::vocab::Vocabulary;
use crate::blocks::{AttentionSublayer, FeedForwardSublayer};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LmLayer {
    pub attn: AttentionSublayer,
    pub ffn: FeedForwardSublayer,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LmLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub width: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

/// Hidden states after the final norm, one row per position of
/// `[prefix ‖ tokens]`.
#[derive(Clone, Copy, Debug)]
pub struct LmOutput {
    pub hidden: Var,
    pub prefix_len: usize,
}

impl LmOutput {
    /// Row of `hidden` holding sequence position `i` (an index into the token ids).
    pub fn row_of(&self, i: usize) -> usize {
        self.prefix_len + i
    }
}

impl LanguageModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        width: usize,
        layers: usize,
        heads: usize,
        mlp_hidden: usize,
        max_positions: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / (width as f64).sqrt();
        let token_embedding = store.normal("lm.token_embedding", &[vocab_size, width], std, rng)?;
        let position_embedding = store.normal("lm.position_embedding", &[max_positions, width], std, rng)?;
        let layers = (0..layers)
            .map(|l| {
                Ok(LmLayer {
                    attn: AttentionSublayer::new(store, &format!("lm.layer{l}.attn"), width, heads, rng)?,
                    ffn: FeedForwardSublayer::new(store, &format!("lm.layer{l}.ffn"), width, mlp_hidden, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNorm::new(store, "lm.final_norm", width)?,
            head: Linear::new(store, "lm.head", width, vocab_size, rng)?,
            width,
            vocab_size,
            max_positions,
        })
    }

    /// Causal pass over `prefix` (`K×d`) followed by the embedded `ids`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prefix: Var, ids: &[usize]) -> Result<LmOutput> {
        let shape = tape.value(prefix).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Invalid(format!(
                "prefix must be K×{}, got {shape:?}",
                self.width
            )));
        }
        if ids.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let k = shape[0];
        let total = k + ids.len();
        if total > self.max_positions {
            return Err(Error::Invalid(format!(
                "sequence of {total} positions exceeds the limit of {}",
                self.max_positions
            )));
        }
        let table = tape.param(store, self.token_embedding);
        let tokens = tape.gather_rows(table, ids)?;
        let x = tape.concat_rows(&[prefix, tokens])?;
        let positions: Vec<usize> = (0..total).collect();
        let pos_table = tape.param(store, self.position_embedding);
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut x = tape.add(x, pos)?;
        for layer in &self.layers {
            x = layer.attn.forward(tape, store, x, None, true)?;
            x = layer.ffn.forward(tape, store, x)?;
        }
        let hidden = self.final_norm.forward(tape, store, x)?;
        Ok(LmOutput { hidden, prefix_len: k })
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, out: &LmOutput, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(out.hidden, rows)?;
        Ok(self.head.forward(tape, store, h)?)
    }

    /// Logits predicting each answer token of `seq` from the position before
    /// it, shape `answer_len × V`, together with the target ids.
    pub fn teacher_forced_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        out: &LmOutput,
        seq: &TokenSequence,
    ) -> Result<(Var, Vec<usize>)> {
        let start = seq.answer_start();
        if start == 0 || start == seq.len() {
            return Err(Error::Invalid("sequence has no answer to score".into()));
        }
        let rows: Vec<usize> = (start..seq.len()).map(|j| out.row_of(j - 1)).collect();
        let logits = self.logits(tape, store, out, &rows)?;
        Ok((logits, seq.ids[start..].to_vec()))
    }

    /// Greedy decoding after `seq` until `[EOS]` or `max_len` new tokens.
    /// Returns the generated ids without the closing `[EOS]`.
    pub fn generate(
        &self,
        store: &ParamStore,
        prefix: &Tensor,
        seq: &TokenSequence,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut ids = seq.ids.clone();
        let mut generated = Vec::new();
        while generated.len() < max_len && prefix.rows() + ids.len() < self.max_positions {
            let mut tape = Tape::new();
            let p = tape.constant(prefix.clone());
            let out = self.forward(&mut tape, store, p, &ids)?;
            let last = out.row_of(ids.len() - 1);
            let logits = self.logits(&mut tape, store, &out, &[last])?;
            let next = argmax(tape.value(logits).data());
            if next == vocab.eos() {
                break;
            }
            ids.push(next);
            generated.push(next);
        }
        Ok(generated)
    }

    /// Freezes everything except the embedding rows and output columns of
    /// `special` tokens.
    pub fn freeze_core(&self, store: &mut ParamStore, special: &[usize]) {
        for id in self.params() {
            store.set_trainable(id, Trainable::Frozen);
        }
        let d = self.width;
        let v = self.vocab_size;
        let mut rows = vec![false; v * d];
        let mut cols = vec![false; d * v];
        let mut bias = vec![false; v];
        for &t in special {
            rows[t * d..(t + 1) * d].fill(true);
            for r in 0..d {
                cols[r * v + t] = true;
            }
            bias[t] = true;
        }
        store.set_trainable(self.token_embedding, Trainable::Mask(rows));
        store.set_trainable(self.head.weight, Trainable::Mask(cols));
        store.set_trainable(self.head.bias, Trainable::Mask(bias));
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            ids.extend(l.attn.params());
            ids.extend(l.ffn.params());
        }
        ids.extend([self.final_norm.gain, self.final_norm.bias, self.head.weight, self.head.bias]);
        ids
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
