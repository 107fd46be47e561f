//! Finite-difference checks of every trainable module on small random
//! instances. Complements the per-op checks in `r3d_tensor::gradcheck`.

use std::sync::Arc;

use r3d_tensor::gradcheck::{check_inputs, check_params, weighted_sum, GradCheck};
use r3d_tensor::{ParamStore, Tape, Tensor};
use rand::Rng;

use crate::config::{PriorMode, RunConfig};
use crate::encoder::{encoder_inputs, EncoderConfig, PointEncoder};
use crate::error::{Error, Result};
use crate::hmd::HierarchicalMaskDecoder;
use crate::interactor::Interactor;
use crate::langmodel::{answer_text, instruction_text, LanguageModel, PromptProjection, Task, TokenSequence};
use crate::losses::{bce_mask_loss, ce_loss, dice_loss, mask_loss};
use crate::model::{Example, PreparedScene, Reason3D};
use crate::pointcloud::PointCloud;
use crate::synthdata::{vocabulary, Sample, Split, FORMAT_VERSION};

/// Coordinates sampled per parameter tensor.
const PER_PARAM: Option<usize> = Some(4);

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn random_mask(rng: &mut impl Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    m[0] = true;
    m
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> Result<PointCloud> {
    let positions = (0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(0.0..0.6))).collect();
    let colors = (0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(0.0..1.0))).collect();
    PointCloud::new(positions, colors)
}

/// Small end-to-end configuration so a full finite-difference pass is quick.
pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        channels: 4,
        encoder_hidden: 4,
        queries: 2,
        interactor_blocks: 1,
        interactor_heads: 2,
        d_lm: 8,
        lm_layers: 1,
        lm_heads: 2,
        lm_mlp_hidden: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        decoder_mlp_hidden: 4,
        loc_hidden: 3,
        superpoint_cell: 0.3,
        tau: 0.3,
        seed,
        ..RunConfig::default()
    }
}

/// Runs the module suite with shapes and weights drawn from `rng`.
pub fn check_modules(rng: &mut impl Rng) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut out = Vec::new();

    // Encoder w.r.t. its parameters.
    {
        let mut store = ParamStore::new();
        let config = EncoderConfig {
            hidden_dims: vec![5, 5],
            out_channels: 4,
            voxel_size: 0.1,
        };
        let enc = PointEncoder::new(&mut store, config, rng)?;
        let inputs = encoder_inputs(&random_cloud(rng, 6)?, 0.1)?;
        let ids = enc.params();
        let g = check_params(&mut store, &ids, PER_PARAM, rng, |tape, store| {
            let x = tape.constant(inputs.clone());
            let f = enc.forward(tape, store, x)?;
            Ok::<_, Error>(weighted_sum(tape, f)?)
        })?;
        out.push(("encoder", g));
    }

    // Interactor w.r.t. superpoint features and parameters.
    {
        let mut store = ParamStore::new();
        let (c, d, m) = (4, 6, rng.random_range(1..5));
        let inter = Interactor::new(&mut store, c, d, 3, 2, 2, 8, rng)?;
        let feats = random_tensor(rng, &[m, c]);
        let g = check_inputs(&[feats.clone()], |tape, v| {
            let q = inter.forward(tape, &store, v[0])?;
            Ok::<_, Error>(weighted_sum(tape, q)?)
        })?;
        out.push(("interactor.features", g));
        let ids = inter.params();
        let g = check_params(&mut store, &ids, PER_PARAM, rng, |tape, store| {
            let f = tape.constant(feats.clone());
            let q = inter.forward(tape, store, f)?;
            Ok::<_, Error>(weighted_sum(tape, q)?)
        })?;
        out.push(("interactor.params", g));
    }

    // Language model and prompt projection under teacher forcing.
    {
        let vocab = vocabulary();
        let mut store = ParamStore::new();
        let d = 8;
        let lm = LanguageModel::new(&mut store, vocab.len(), d, 1, 2, 8, 64, rng)?;
        let proj = PromptProjection::new(&mut store, d, 4, false, rng)?;
        let task = Task::Search;
        let seq = TokenSequence::new(
            &vocab,
            &instruction_text(task, "the bed in the kitchen"),
            Some(&answer_text(task, "")),
        )?;
        let prefix = random_tensor(rng, &[2, d]);
        let loss = |tape: &mut Tape, store: &ParamStore, prefix| -> Result<_> {
            let out = lm.forward(tape, store, prefix, &seq.ids)?;
            let (logits, targets) = lm.teacher_forced_logits(tape, store, &out, &seq)?;
            let ce = ce_loss(tape, logits, &targets)?;
            let p = proj.extract(tape, store, &out, &seq, &vocab, task, true)?;
            let seg = weighted_sum(tape, p.p_seg.expect("seg"))?;
            let loc = weighted_sum(tape, p.p_loc.expect("loc"))?;
            let s = tape.add(ce, seg)?;
            Ok(tape.add(s, loc)?)
        };
        let g = check_inputs(&[prefix.clone()], |tape, v| loss(tape, &store, v[0]))?;
        out.push(("langmodel.prefix", g));
        let ids: Vec<_> = lm.params().into_iter().chain(proj.params()).collect();
        let g = check_params(&mut store, &ids, PER_PARAM, rng, |tape, store| {
            let p = tape.constant(prefix.clone());
            loss(tape, store, p)
        })?;
        out.push(("langmodel.params", g));
    }

    // Hierarchical mask decoder with a non-zero location prior.
    {
        let mut store = ParamStore::new();
        let (c, m) = (4, rng.random_range(2..6));
        let hmd = HierarchicalMaskDecoder::new(&mut store, c, 2, 2, 6, 3, PriorMode::Probability, rng)?;
        let out_layer = hmd.prior.mlp.output();
        *store.value_mut(out_layer.weight) = random_tensor(rng, &[3, c]);
        let p_loc = random_tensor(rng, &[1, c]);
        let p_seg = random_tensor(rng, &[1, c]);
        let feats = random_tensor(rng, &[m, c]);
        let seg_gt = random_mask(rng, m);
        let loc_gt = random_mask(rng, m);
        let loss = |tape: &mut Tape, store: &ParamStore, v: &[_]| -> Result<_> {
            let o = hmd.forward(tape, store, Some(v[0]), v[1], v[2])?;
            let seg = mask_loss(tape, o.seg_logits, &seg_gt, 1.0)?;
            let loc = mask_loss(tape, o.loc_logits.expect("loc"), &loc_gt, 1.0)?;
            Ok(tape.add(seg, loc)?)
        };
        let inputs = [p_loc, p_seg, feats];
        let g = check_inputs(&inputs, |tape, v| loss(tape, &store, v))?;
        out.push(("hmd.inputs", g));
        let ids = hmd.params();
        let g = check_params(&mut store, &ids, PER_PARAM, rng, |tape, store| {
            let v: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            loss(tape, store, &v)
        })?;
        out.push(("hmd.params", g));
    }

    // Losses w.r.t. logits.
    {
        let (rows, v) = (rng.random_range(1..4), rng.random_range(2..6));
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..v)).collect();
        let g = check_inputs(&[random_tensor(rng, &[rows, v])], |tape, x| ce_loss(tape, x[0], &targets))?;
        out.push(("loss.ce", g));
        let m = rng.random_range(1..8);
        let gt = random_mask(rng, m);
        let logits = random_tensor(rng, &[m]);
        let g = check_inputs(&[logits.clone()], |tape, x| bce_mask_loss(tape, x[0], &gt))?;
        out.push(("loss.bce", g));
        let g = check_inputs(&[logits], |tape, x| dice_loss(tape, x[0], &gt, 1.0))?;
        out.push(("loss.dice", g));
    }

    // Whole model on a random scene.
    {
        let cfg = tiny_config(rng.random());
        let mut model = Reason3D::new(cfg.clone(), vocabulary())?;
        let out_layer = model.hmd.prior.mlp.output();
        *model.store.value_mut(out_layer.weight) = random_tensor(rng, &[cfg.loc_hidden, cfg.channels]);
        let cloud = random_cloud(rng, 10)?;
        let scene = Arc::new(PreparedScene::new(cloud, &cfg)?);
        let task = Task::Search;
        let sample = Sample {
            format_version: FORMAT_VERSION,
            scene_id: "grad".into(),
            task,
            instruction: instruction_text(task, "the lamp in the office"),
            answer: answer_text(task, ""),
            description: "the lamp in the office".into(),
            points_file: "points/grad.r3dp".into(),
            gt_object: vec![0, 3, 4],
            gt_region: vec![0, 1, 3, 4, 7],
            room_type: "office".into(),
            split: Split::Train,
        };
        let ex = Example::new(&sample, scene, &model.vocab, &cfg)?;
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        let mut store = model.store.clone();
        let g = check_params(&mut store, &ids, Some(1), rng, |tape, store| {
            model.forward_loss_with(tape, store, &ex).map(|(loss, _)| loss)
        })?;
        out.push(("reason3d.loss", g));
    }

    Ok(out)
}
