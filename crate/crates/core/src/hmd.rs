//! Coarse-to-fine mask decoding.
//!
//! A location decoder turns the `[LOC]` prompt into per-superpoint region
//! logits. Their sigmoid, re-encoded by a small MLP, is added to the
//! superpoint features, and a segmentation decoder with the same layout but
//! its own weights reads the `[SEG]` prompt against those fused features.

use r3d_tensor::{Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::blocks::{AttentionSublayer, FeedForwardSublayer};
use crate::config::PriorMode;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross_attn: AttentionSublayer,
    pub ffn: FeedForwardSublayer,
}

/// A single prompt query refined against superpoint features, then scored
/// against every superpoint by an inner product.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub layers: Vec<DecoderLayer>,
    pub mask_head: Mlp,
    pub channels: usize,
}

impl MaskDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        layers: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                Ok(DecoderLayer {
                    cross_attn: AttentionSublayer::new(store, &format!("{name}.layer{l}.cross"), channels, heads, rng)?,
                    ffn: FeedForwardSublayer::new(store, &format!("{name}.layer{l}.ffn"), channels, mlp_hidden, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let mask_head = Mlp::new(store, &format!("{name}.mask_head"), &[channels, channels, channels], rng)?;
        Ok(Self {
            layers,
            mask_head,
            channels,
        })
    }

    /// `prompt` is `1×C`, `feats` is `M×C`. Returns the length-`M` logits and
    /// the refined query.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prompt: Var, feats: Var) -> Result<(Var, Var)> {
        let ps = tape.value(prompt).shape();
        let fs = tape.value(feats).shape();
        if ps != [1, self.channels] || fs.len() != 2 || fs[1] != self.channels {
            return Err(Error::Invalid(format!(
                "decoder width {} cannot take prompt {ps:?} with features {fs:?}",
                self.channels
            )));
        }
        let m = fs[0];
        let mut q = prompt;
        for layer in &self.layers {
            q = layer.cross_attn.forward(tape, store, q, Some(feats), false)?;
            q = layer.ffn.forward(tape, store, q)?;
        }
        let embed = self.mask_head.forward(tape, store, q)?;
        let scores = tape.matmul_nt(feats, embed)?;
        let logits = tape.reshape(scores, &[m])?;
        Ok((logits, q))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend(l.cross_attn.params());
            ids.extend(l.ffn.params());
        }
        ids.extend(self.mask_head.layers.iter().flat_map(|l| [l.weight, l.bias]));
        ids
    }
}

/// `H_loc`: a two-layer MLP `1 → hidden → C` over location probabilities.
#[derive(Clone, Debug)]
pub struct LocationPrior {
    pub mlp: Mlp,
}

impl LocationPrior {
    /// The output layer starts at zero so fused features begin equal to `F_s`.
    pub fn new(store: &mut ParamStore, hidden: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mlp = Mlp::new(store, "hmd.location_prior", &[1, hidden, channels], rng)?;
        mlp.output().zero(store);
        Ok(Self { mlp })
    }

    /// `F_s + H_loc(prior)` with the prior derived from `loc_logits`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        loc_logits: Var,
        feats: Var,
        mode: PriorMode,
    ) -> Result<Var> {
        let m = tape.value(loc_logits).numel();
        if tape.value(feats).shape().first() != Some(&m) {
            return Err(Error::Invalid(format!(
                "{m} location logits for features {:?}",
                tape.value(feats).shape()
            )));
        }
        let prior = match mode {
            PriorMode::Probability => {
                let p = tape.sigmoid(loc_logits)?;
                tape.reshape(p, &[m, 1])?
            }
            PriorMode::Hard => {
                let hard = tape.value(loc_logits).map(|z| if z >= 0.0 { 1.0 } else { 0.0 });
                tape.constant(hard.reshape(vec![m, 1])?)
            }
        };
        let offset = self.mlp.forward(tape, store, prior)?;
        Ok(tape.add(feats, offset)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct HierarchicalMaskDecoder {
    pub location: MaskDecoder,
    pub segmentation: MaskDecoder,
    pub prior: LocationPrior,
    pub mode: PriorMode,
}

#[derive(Clone, Copy, Debug)]
pub struct HmdOutput {
    pub loc_logits: Option<Var>,
    pub seg_logits: Var,
    pub fused: Var,
}

impl HierarchicalMaskDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        layers: usize,
        heads: usize,
        mlp_hidden: usize,
        prior_hidden: usize,
        mode: PriorMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            location: MaskDecoder::new(store, "hmd.location", channels, layers, heads, mlp_hidden, rng)?,
            segmentation: MaskDecoder::new(store, "hmd.segmentation", channels, layers, heads, mlp_hidden, rng)?,
            prior: LocationPrior::new(store, prior_hidden, channels, rng)?,
            mode,
        })
    }

    /// Without a location prompt the fine decoder reads `F_s` directly and no
    /// location mask is produced.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p_loc: Option<Var>,
        p_seg: Var,
        feats: Var,
    ) -> Result<HmdOutput> {
        let (loc_logits, fused) = match p_loc {
            Some(p) => {
                let (loc, _) = self.location.forward(tape, store, p, feats)?;
                let fused = self.prior.fuse(tape, store, loc, feats, self.mode)?;
                (Some(loc), fused)
            }
            None => (None, feats),
        };
        let (seg_logits, _) = self.segmentation.forward(tape, store, p_seg, fused)?;
        Ok(HmdOutput {
            loc_logits,
            seg_logits,
            fused,
        })
    }

    /// Copies every location-decoder weight into the segmentation decoder.
    pub fn copy_location_into_segmentation(&self, store: &mut ParamStore) {
        for (src, dst) in self.location.params().into_iter().zip(self.segmentation.params()) {
            let v: Tensor = store.value(src).clone();
            *store.value_mut(dst) = v;
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.location.params();
        ids.extend(self.segmentation.params());
        ids.extend(self.prior.params());
        ids
    }
}
