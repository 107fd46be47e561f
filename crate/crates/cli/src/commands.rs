use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use r3d_tensor::Checkpoint;
use reason3d::langmodel::{instruction_text, Task, Vocabulary};
use reason3d::metrics::{evaluate, Prediction};
use reason3d::pointcloud::{mask_from_indices, PointCloud};
use reason3d::postprocess::{extract_box, DEFAULT_EPS, DEFAULT_MIN_PTS};
use reason3d::synthdata::{generate_corpus, vocabulary, write_dataset, Dataset, GenConfig, Sample, Split};
use reason3d::train::{load_examples, predict_all, StepReport};
use reason3d::{Error, Execution, Reason3D, RunConfig, Trainer};
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::log::{event_line, EventLog};
use crate::{Context, EvalArgs, GendataArgs, InferArgs, SplitArg, TrainArgs};

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn parse_rooms(text: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("--rooms expects N or A-B, got {text:?}"));
    let (lo, hi) = match text.split_once('-') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let n = text.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn parse_task(text: &str) -> Result<Task> {
    text.trim().parse().map_err(|_| CliError::Usage(format!("unknown task {text:?}")))
}

pub fn gendata(args: &GendataArgs, log: &mut EventLog) -> Result<()> {
    let task_mix = args.task_mix.iter().map(|t| parse_task(t)).collect::<Result<Vec<_>>>()?;
    let cfg = GenConfig {
        scenes: args.scenes,
        rooms: parse_rooms(&args.rooms)?,
        objects_per_room: args.objects_per_room,
        points_per_object: args.points_per_object,
        seed: args.seed,
        task_mix,
        tasks_per_scene: args.tasks_per_scene,
        val_scenes: args.val_scenes,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (scenes, samples) = generate_corpus(&cfg, Execution::Parallel)?;
    let manifest = write_dataset(&args.out, &scenes, &samples)?;
    log.emit(
        "gendata",
        json!({
            "out": args.out,
            "scenes": manifest.n_scenes,
            "samples": manifest.n_samples,
            "tasks": manifest.tasks,
            "splits": manifest.splits,
            "digest": manifest.digest,
        }),
    );
    Ok(())
}

/// The metrics log line for one step; runs without the location branch
/// carry no location term.
pub fn step_line(report: &StepReport, include_loc: bool) -> String {
    let mut fields = serde_json::to_value(report).expect("step reports are plain numbers");
    if !include_loc {
        if let Value::Object(map) = &mut fields {
            map.remove("mask_loc");
        }
    }
    event_line("step", fields)
}

pub fn train(args: &TrainArgs, ctx: &Context, log: &mut EventLog) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if args.no_loc {
        cfg.include_loc = false;
    }
    if args.freeze_lm_core {
        cfg.freeze_lm_core = true;
    }
    if let Some(seed) = ctx.seed_override {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let dataset = Dataset::open(&args.data)?;
    let samples = dataset.split(Split::Train);
    if samples.is_empty() {
        return Err(Error::Schema(format!("{} has no training samples", args.data.display())).into());
    }
    let resume = args.resume.as_ref().map(Checkpoint::load).transpose()?;
    let model = Reason3D::new(cfg.clone(), vocabulary())?;
    let exec = execution(args.sequential);
    let examples = load_examples(&model, &dataset, &samples, exec)?;
    let mut trainer = Trainer::new(model, exec)?;
    if let Some(ckpt) = &resume {
        trainer = trainer.resume(ckpt)?;
    }

    fs::create_dir_all(&args.out).map_err(CliError::io(&args.out))?;
    cfg.save(args.out.join(CONFIG_FILE))?;
    trainer.model.vocab.save(args.out.join(VOCAB_FILE))?;
    let metrics_path = args.out.join(METRICS_FILE);
    let metrics_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(CliError::io(&metrics_path))?;
    let mut metrics = BufWriter::new(metrics_file);

    let per_epoch = trainer.steps_per_epoch(examples.len());
    log.emit(
        "train_start",
        json!({
            "config_digest": cfg.digest(),
            "samples": examples.len(),
            "start_step": trainer.step,
            "total_steps": cfg.total_steps,
            "steps_per_epoch": per_epoch,
            "include_loc": cfg.include_loc,
        }),
    );
    let out = args.out.clone();
    let mut last = None;
    trainer.run(&examples, |t, report| {
        writeln!(metrics, "{}", step_line(report, cfg.include_loc))?;
        if t.step % per_epoch == 0 || t.finished() {
            metrics.flush()?;
            let name = epoch_checkpoint(report.epoch + 1);
            t.checkpoint().save(out.join(&name))?;
            log.emit(
                "checkpoint",
                json!({ "step": t.step, "epoch": report.epoch + 1, "file": name, "total_loss": report.loss.total }),
            );
        }
        last = Some(*report);
        Ok(())
    })?;
    metrics.flush().map_err(CliError::io(&metrics_path))?;
    trainer.checkpoint().save(args.out.join(FINAL_CHECKPOINT))?;
    log.emit(
        "train_done",
        json!({
            "steps": trainer.step,
            "final_loss": last.map(|r| r.loss.total),
            "checkpoint": args.out.join(FINAL_CHECKPOINT),
            "config_digest": cfg.digest(),
        }),
    );
    Ok(())
}

/// Config, vocabulary and weights of a checkpoint. The config and vocabulary
/// default to the files the training run wrote beside it.
pub fn load_run(ckpt_path: &Path, config: Option<&Path>) -> Result<(RunConfig, Vocabulary, Checkpoint)> {
    let dir = ckpt_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let config_path: PathBuf = config.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CONFIG_FILE));
    let cfg = RunConfig::load(&config_path)?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() { Vocabulary::load(&vocab_path)? } else { vocabulary() };
    let ckpt = Checkpoint::load(ckpt_path)?;
    Ok((cfg, vocab, ckpt))
}

fn check_digest(ckpt: &Checkpoint, cfg: &RunConfig, force: bool) -> Result<()> {
    if ckpt.digest != cfg.digest() && !force {
        return Err(CliError::DigestMismatch {
            checkpoint: ckpt.digest.clone(),
            config: cfg.digest(),
        });
    }
    Ok(())
}

fn ground_truth_mask(dataset: &Dataset, sample: &Sample) -> Result<Vec<bool>> {
    let cloud = dataset.load_points(sample)?;
    Ok(mask_from_indices(cloud.len(), &sample.gt_object)?)
}

pub fn eval(args: &EvalArgs, log: &mut EventLog) -> Result<()> {
    if args.thresholds.is_empty() || args.thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
        return Err(CliError::Usage(format!("thresholds must lie in [0, 1), got {:?}", args.thresholds)));
    }
    let (cfg, vocab, ckpt) = load_run(&args.ckpt, args.config.as_deref())?;
    check_digest(&ckpt, &cfg, args.force)?;
    let dataset = Dataset::open(&args.data)?;
    let samples: Vec<&Sample> = match args.split {
        SplitArg::Train => dataset.split(Split::Train),
        SplitArg::Val => dataset.split(Split::Val),
        SplitArg::All => dataset.samples.iter().collect(),
    };
    let exec = execution(args.sequential);
    let (predictions, truth) = if args.predictions_from_gt {
        let truth = samples.iter().map(|s| ground_truth_mask(&dataset, s)).collect::<Result<Vec<_>>>()?;
        (truth.iter().cloned().map(Prediction::Mask).collect(), truth)
    } else {
        let model = Reason3D::from_checkpoint(cfg.clone(), vocab, &ckpt)?;
        let examples = load_examples(&model, &dataset, &samples, exec)?;
        let predictions = predict_all(&model, &examples, exec)?;
        (predictions, examples.into_iter().map(|e| e.point_gt).collect())
    };
    let report = evaluate(&predictions, &truth, &args.thresholds, &cfg.digest())?;
    fs::write(&args.report, report.to_json_string()).map_err(CliError::io(&args.report))?;
    log.emit("eval", json!({ "report": args.report, "metrics": report.to_json() }));
    Ok(())
}

pub fn infer(args: &InferArgs, log: &mut EventLog) -> Result<()> {
    let task = parse_task(&args.task)?;
    let (cfg, vocab, ckpt) = load_run(&args.ckpt, args.config.as_deref())?;
    check_digest(&ckpt, &cfg, false)?;
    let cloud = PointCloud::load(&args.scene)?;
    let model = Reason3D::from_checkpoint(cfg.clone(), vocab, &ckpt)?;
    let scene = model.prepare_scene(cloud)?;
    let instruction = instruction_text(task, &args.query);
    let inference = model.infer(&scene, task, &instruction)?;
    let mask: Vec<usize> = inference.point_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let mut result = json!({
        "answer": inference.answer,
        "task": task.name(),
        "query": args.query,
        "n_points": scene.cloud.len(),
        "mask": mask,
        "config_digest": cfg.digest(),
    });
    if args.emit_box {
        let bbox = match extract_box(scene.cloud.positions(), &inference.point_mask, DEFAULT_EPS, DEFAULT_MIN_PTS) {
            Ok((b, source)) => json!({ "min": b.min, "max": b.max, "source": source }),
            Err(Error::EmptyMask) => Value::Null,
            Err(e) => return Err(e.into()),
        };
        result["box"] = bbox;
    }
    let mut text = serde_json::to_string_pretty(&result).expect("inference result is plain JSON");
    text.push('\n');
    let mut file = File::create(&args.emit_mask).map_err(CliError::io(&args.emit_mask))?;
    file.write_all(text.as_bytes()).map_err(CliError::io(&args.emit_mask))?;
    log.emit(
        "infer",
        json!({ "answer": inference.answer, "mask_points": mask.len(), "output": args.emit_mask }),
    );
    Ok(())
}
