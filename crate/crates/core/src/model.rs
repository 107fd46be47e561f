//! The full pipeline: scene encoding, query interaction, language modelling
//! and hierarchical mask decoding.

use std::sync::Arc;

use r3d_tensor::{Checkpoint, GradBuffer, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::{encoder_inputs, EncoderConfig, PointEncoder};
use crate::error::{Error, Result};
use crate::hmd::HierarchicalMaskDecoder;
use crate::interactor::Interactor;
use crate::langmodel::{
    argmax, with_location_token, LanguageModel, PromptProjection, Role, Task, TokenSequence, Vocabulary,
};
use crate::losses::{ce_loss, make_region_gt, mask_loss, LossConfig, LossReport};
use crate::pointcloud::{
    compute_superpoints, lift_point_mask_to_superpoints, mask_from_indices, project_mask_to_points, PointCloud,
    Pooling, SuperpointPartition,
};
use crate::synthdata::Sample;

/// A scene reduced once and shared by every sample over it.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub cloud: PointCloud,
    pub encoder_inputs: Tensor,
    pub partition: SuperpointPartition,
}

impl PreparedScene {
    pub fn new(cloud: PointCloud, cfg: &RunConfig) -> Result<Self> {
        let encoder_inputs = encoder_inputs(&cloud, cfg.voxel_size)?;
        let partition = compute_superpoints(&cloud, cfg.superpoint_method())?;
        Ok(Self {
            cloud,
            encoder_inputs,
            partition,
        })
    }
}

/// A training or evaluation example with superpoint-level targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub scene: Arc<PreparedScene>,
    pub task: Task,
    pub instruction: String,
    /// Conversation ids with the target answer.
    pub sequence: TokenSequence,
    pub point_gt: Vec<bool>,
    pub seg_gt: Vec<bool>,
    pub loc_gt: Vec<bool>,
}

/// Answer the model is trained to produce for a sample.
pub fn target_answer(sample_answer: &str, task: Task, include_loc: bool) -> String {
    if include_loc && !task.demands_loc() {
        with_location_token(sample_answer)
    } else {
        sample_answer.to_string()
    }
}

impl Example {
    pub fn new(sample: &Sample, scene: Arc<PreparedScene>, vocab: &Vocabulary, cfg: &RunConfig) -> Result<Self> {
        let n = scene.cloud.len();
        sample.validate(n)?;
        let answer = target_answer(&sample.answer, sample.task, cfg.include_loc);
        let sequence = TokenSequence::new(vocab, &sample.instruction, Some(&answer))?;
        let point_gt = mask_from_indices(n, &sample.gt_object)?;
        let region = make_region_gt(
            scene.cloud.positions(),
            &sample.gt_object,
            Some(&sample.gt_region),
            sample.task,
            &LossConfig::from_run(cfg),
        )?;
        Ok(Self {
            seg_gt: lift_point_mask_to_superpoints(&point_gt, &scene.partition)?,
            loc_gt: lift_point_mask_to_superpoints(&region, &scene.partition)?,
            task: sample.task,
            instruction: sample.instruction.clone(),
            sequence,
            point_gt,
            scene,
        })
    }
}

/// Outcome of running the model on one instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub answer_ids: Vec<usize>,
    pub answer: String,
    /// Per-superpoint probabilities.
    pub seg_probs: Vec<f64>,
    pub loc_probs: Option<Vec<f64>>,
    /// Binarized and projected to points.
    pub point_mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Reason3D {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: PointEncoder,
    pub interactor: Interactor,
    pub lm: LanguageModel,
    pub projection: PromptProjection,
    pub hmd: HierarchicalMaskDecoder,
}

impl Reason3D {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let d = config.d_lm;
        let encoder = PointEncoder::new(
            &mut store,
            EncoderConfig {
                hidden_dims: vec![config.encoder_hidden, config.encoder_hidden],
                out_channels: c,
                voxel_size: config.voxel_size,
            },
            &mut rng,
        )?;
        let interactor = Interactor::new(
            &mut store,
            c,
            d,
            config.queries,
            config.interactor_blocks,
            config.interactor_heads,
            config.lm_mlp_hidden,
            &mut rng,
        )?;
        let lm = LanguageModel::new(
            &mut store,
            vocab.len(),
            d,
            config.lm_layers,
            config.lm_heads,
            config.lm_mlp_hidden,
            config.max_positions,
            &mut rng,
        )?;
        let projection = PromptProjection::new(&mut store, d, c, config.shared_projection, &mut rng)?;
        let hmd = HierarchicalMaskDecoder::new(
            &mut store,
            c,
            config.decoder_layers,
            config.decoder_heads,
            config.decoder_mlp_hidden,
            config.loc_hidden,
            config.prior_mode,
            &mut rng,
        )?;
        if config.freeze_encoder {
            encoder.freeze(&mut store);
        }
        if config.freeze_lm_core {
            lm.freeze_core(&mut store, &[vocab.loc(), vocab.seg()]);
        }
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            interactor,
            lm,
            projection,
            hmd,
        })
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, &self.digest())
    }

    /// Model for `config` with weights and optimizer state from `ckpt`.
    pub fn from_checkpoint(config: RunConfig, vocab: Vocabulary, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(config, vocab)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }

    pub fn prepare_scene(&self, cloud: PointCloud) -> Result<PreparedScene> {
        PreparedScene::new(cloud, &self.config)
    }

    fn pooling(&self) -> Pooling {
        self.config.pooling_mode()
    }

    /// Superpoint features `F_s`, `M×C`.
    pub fn scene_features(&self, tape: &mut Tape, scene: &PreparedScene) -> Result<Var> {
        self.scene_features_with(tape, &self.store, scene)
    }

    fn scene_features_with(&self, tape: &mut Tape, store: &ParamStore, scene: &PreparedScene) -> Result<Var> {
        let x = tape.constant(scene.encoder_inputs.clone());
        let f = self.encoder.forward(tape, store, x)?;
        let part = &scene.partition;
        Ok(match self.pooling() {
            Pooling::Avg => tape.segment_mean(f, part.assignment(), part.count())?,
            Pooling::Max => tape.segment_max(f, part.assignment(), part.count())?,
        })
    }

    /// Records the full training loss for one example.
    pub fn forward_loss(&self, tape: &mut Tape, ex: &Example) -> Result<(Var, LossReport)> {
        self.forward_loss_with(tape, &self.store, ex)
    }

    /// [`Reason3D::forward_loss`] with weights taken from `store`, which must
    /// share this model's layout.
    pub fn forward_loss_with(&self, tape: &mut Tape, store: &ParamStore, ex: &Example) -> Result<(Var, LossReport)> {
        let feats = self.scene_features_with(tape, store, &ex.scene)?;
        let queries = self.interactor.forward(tape, store, feats)?;
        let out = self.lm.forward(tape, store, queries, &ex.sequence.ids)?;
        let (logits, targets) = self.lm.teacher_forced_logits(tape, store, &out, &ex.sequence)?;
        let llm = ce_loss(tape, logits, &targets)?;

        let prompts = self.projection.extract(
            tape,
            store,
            &out,
            &ex.sequence,
            &self.vocab,
            ex.task,
            self.config.include_loc,
        )?;
        let p_seg = prompts.p_seg.ok_or(Error::NoSegToken)?;
        let masks = self.hmd.forward(tape, store, prompts.p_loc, p_seg, feats)?;
        let seg = mask_loss(tape, masks.seg_logits, &ex.seg_gt, self.config.dice_smooth)?;
        let loc = match masks.loc_logits {
            Some(l) => Some(mask_loss(tape, l, &ex.loc_gt, self.config.dice_smooth)?),
            None => None,
        };
        // Same association as `LossReport::from_parts`, so the two agree bitwise.
        let mut total = llm;
        if let Some(l) = loc {
            total = tape.add(total, l)?;
        }
        let total = tape.add(total, seg)?;
        let report = LossReport::from_parts(
            tape.value(llm).item(),
            loc.map(|l| tape.value(l).item()),
            tape.value(seg).item(),
        );
        Ok((total, report))
    }

    /// Parameter gradients and loss components for one example.
    pub fn gradients(&self, ex: &Example) -> Result<(GradBuffer, LossReport)> {
        let mut tape = Tape::new();
        let (loss, report) = self.forward_loss(&mut tape, ex)?;
        let grads = tape.backward(loss)?;
        Ok((grads.to_buffer(&self.store), report))
    }

    /// Fraction of answer tokens predicted correctly under teacher forcing.
    pub fn answer_token_accuracy(&self, ex: &Example) -> Result<f64> {
        let mut tape = Tape::new();
        let feats = self.scene_features(&mut tape, &ex.scene)?;
        let queries = self.interactor.forward(&mut tape, &self.store, feats)?;
        let out = self.lm.forward(&mut tape, &self.store, queries, &ex.sequence.ids)?;
        let (logits, targets) = self.lm.teacher_forced_logits(&mut tape, &self.store, &out, &ex.sequence)?;
        let v = self.vocab.len();
        let data = tape.value(logits).data();
        let correct = targets
            .iter()
            .enumerate()
            .filter(|&(r, &t)| argmax(&data[r * v..(r + 1) * v]) == t)
            .count();
        Ok(correct as f64 / targets.len() as f64)
    }

    /// Generates an answer for `instruction` and decodes the masks it prompts.
    pub fn infer(&self, scene: &PreparedScene, task: Task, instruction: &str) -> Result<Inference> {
        let mut tape = Tape::new();
        let feats = self.scene_features(&mut tape, scene)?;
        let queries = self.interactor.forward(&mut tape, &self.store, feats)?;
        let feats = tape.value(feats).clone();
        let prefix = tape.value(queries).clone();

        let prompt = TokenSequence::new(&self.vocab, instruction, None)?;
        let answer_ids =
            self.lm
                .generate(&self.store, &prefix, &prompt, &self.vocab, self.config.max_answer_len)?;
        let answer = self.vocab.decode(&answer_ids)?;
        let mut seq = prompt;
        seq.ids.extend(&answer_ids);
        seq.roles.resize(seq.ids.len(), Role::Answer);

        let mut tape = Tape::new();
        let prefix = tape.constant(prefix);
        let feats = tape.constant(feats);
        let out = self.lm.forward(&mut tape, &self.store, prefix, &seq.ids)?;
        let prompts =
            self.projection
                .extract(&mut tape, &self.store, &out, &seq, &self.vocab, task, self.config.include_loc)?;
        let p_seg = prompts.p_seg.ok_or(Error::NoSegToken)?;
        let masks = self.hmd.forward(&mut tape, &self.store, prompts.p_loc, p_seg, feats)?;
        let probs = |v: Var| tape.value(v).data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect::<Vec<_>>();
        let seg_probs = probs(masks.seg_logits);
        let loc_probs = masks.loc_logits.map(probs);
        let binary: Vec<bool> = seg_probs.iter().map(|&p| p >= self.config.mask_threshold).collect();
        let point_mask = project_mask_to_points(&binary, &scene.partition)?;
        Ok(Inference {
            answer_ids,
            answer,
            seg_probs,
            loc_probs,
            point_mask,
        })
    }
}
