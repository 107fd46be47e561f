//! Hidden states at `[LOC]`/`[SEG]` positions and their projection `G` into
//! the mask-decoder feature space.

use r3d_tensor::{Mlp, ParamId, ParamStore, Tape, Var};
use rand::Rng;

use super::model::LmOutput;
use super::template::{Task, TokenSequence};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Two-layer MLP `d → d → C`, shared by both special tokens or one per token.
#[derive(Clone, Debug)]
pub struct PromptProjection {
    pub seg: Mlp,
    /// `None` when the location token reuses `seg`.
    pub loc: Option<Mlp>,
}

/// Projected prompts; each is `1×C` and present iff its token was found.
#[derive(Clone, Copy, Debug)]
pub struct PromptEmbeddings {
    pub h_loc: Option<Var>,
    pub h_seg: Option<Var>,
    pub p_loc: Option<Var>,
    pub p_seg: Option<Var>,
}

impl PromptProjection {
    pub fn new(store: &mut ParamStore, width: usize, channels: usize, shared: bool, rng: &mut impl Rng) -> Result<Self> {
        let seg = Mlp::new(store, "prompt.seg", &[width, width, channels], rng)?;
        let loc = if shared {
            None
        } else {
            Some(Mlp::new(store, "prompt.loc", &[width, width, channels], rng)?)
        };
        Ok(Self { seg, loc })
    }

    pub fn loc_mlp(&self) -> &Mlp {
        self.loc.as_ref().unwrap_or(&self.seg)
    }

    /// Takes hidden rows at the special-token positions of `seq` and projects
    /// them. `[SEG]` must be present; a missing `[LOC]` is an error only when
    /// `task` demands one.
    pub fn extract(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        out: &LmOutput,
        seq: &TokenSequence,
        vocab: &Vocabulary,
        task: Task,
        want_loc: bool,
    ) -> Result<PromptEmbeddings> {
        let seg_pos = seq.find_in_answer(vocab.seg()).ok_or(Error::NoSegToken)?;
        let loc_pos = seq.find_in_answer(vocab.loc());
        if loc_pos.is_none() && task.demands_loc() && want_loc {
            return Err(Error::NoLocToken);
        }
        let h_seg = tape.gather_rows(out.hidden, &[out.row_of(seg_pos)])?;
        let p_seg = self.seg.forward(tape, store, h_seg)?;
        let (h_loc, p_loc) = match loc_pos.filter(|_| want_loc) {
            Some(pos) => {
                let h = tape.gather_rows(out.hidden, &[out.row_of(pos)])?;
                let p = self.loc_mlp().forward(tape, store, h)?;
                (Some(h), Some(p))
            }
            None => (None, None),
        };
        Ok(PromptEmbeddings {
            h_loc,
            h_seg: Some(h_seg),
            p_loc,
            p_seg: Some(p_seg),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.seg.layers.iter().flat_map(|l| [l.weight, l.bias]).collect();
        if let Some(loc) = &self.loc {
            ids.extend(loc.layers.iter().flat_map(|l| [l.weight, l.bias]));
        }
        ids
    }
}
