use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reason3d::gradsuite::tiny_config;
use reason3d::metrics::iou;
use reason3d::pointcloud::mask_from_indices;
use reason3d::synthdata::{read_index, vocabulary, Manifest};
use reason3d::{Reason3D, RunConfig};
use reason3d_cli::commands::{epoch_checkpoint, CONFIG_FILE, FINAL_CHECKPOINT, METRICS_FILE, VOCAB_FILE};
use serde_json::Value;
use tempfile::TempDir;

fn reason3d(args: &[&str]) -> Output {
    reason3d_with_env(args, &[])
}

fn reason3d_with_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reason3d"));
    cmd.args(args).env_remove("R3D_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> &Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn events(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("every log line is JSON"))
        .collect()
}

fn error_event(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(text.lines().last().expect("an error line")).expect("error line is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gendata(dir: &Path, extra: &[&str]) -> Manifest {
    let mut args = vec!["gendata", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&reason3d(&args));
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    cfg.save(&path).unwrap();
    path
}

fn quick_config() -> RunConfig {
    RunConfig { batch_size: 4, total_steps: 6, warmup_steps: 2, ..tiny_config(0) }
}

/// Small corpus plus a trained run directory.
struct Run {
    _root: TempDir,
    data: PathBuf,
    out: PathBuf,
    config: PathBuf,
}

fn trained(cfg: &RunConfig, gen: &[&str], train: &[&str]) -> Run {
    let root = TempDir::new().unwrap();
    let data = root.path().join("data");
    gendata(&data, gen);
    let config = write_config(root.path(), cfg);
    let out = root.path().join("run");
    let mut args = vec!["train", "--config", p(&config), "--data", p(&data), "--out", p(&out)];
    args.extend_from_slice(train);
    ok(&reason3d(&args));
    Run { _root: root, data, out, config }
}

fn eval_report(run: &Run, ckpt: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let report = run.out.join(format!("report{}.json", extra.len()));
    let mut args = vec!["eval", "--ckpt", p(ckpt), "--data", p(&run.data), "--report", p(&report)];
    args.extend_from_slice(extra);
    (reason3d(&args), report)
}

#[test]
fn zero_scenes_give_an_empty_valid_dataset() {
    let dir = TempDir::new().unwrap();
    let m = gendata(dir.path(), &["--scenes", "0"]);
    assert_eq!((m.n_scenes, m.n_samples), (0, 0));
    assert!(read_index(dir.path()).unwrap().is_empty());
}

#[test]
fn gendata_is_reproducible_and_covers_the_default_mix() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ma = gendata(a.path(), &["--scenes", "4", "--seed", "9"]);
    let mb = gendata(b.path(), &["--scenes", "4", "--seed", "9"]);
    assert_eq!(ma, mb);
    for task in ["reasoning", "search", "refer"] {
        assert!(ma.tasks.get(task).copied().unwrap_or(0) > 0, "{task} missing");
    }
    let c = TempDir::new().unwrap();
    assert_ne!(gendata(c.path(), &["--scenes", "4", "--seed", "10"]).digest, ma.digest);
}

#[test]
fn bad_arguments_exit_with_usage() {
    let dir = TempDir::new().unwrap();
    let out = p(dir.path());
    for args in [
        vec!["gendata", "--out", out, "--rooms", "0"],
        vec!["gendata", "--out", out, "--rooms", "4-2"],
        vec!["gendata", "--out", out, "--task-mix", "qa"],
        vec!["gendata", "--out", out, "--scenes", "2", "--val-scenes", "3"],
        vec!["gendata", "--out", out, "--rooms", "6"],
        vec!["gendata", "--bogus"],
        vec!["frobnicate"],
    ] {
        assert_eq!(reason3d(&args).status.code(), Some(2), "{args:?}");
    }
    let bad_seed = reason3d_with_env(&["gendata", "--out", out, "--scenes", "0"], &[("R3D_SEED", "x")]);
    assert_eq!(bad_seed.status.code(), Some(2));
    assert_eq!(error_event(&bad_seed)["kind"], "usage");
}

#[test]
fn training_writes_its_artifacts_and_logs() {
    let run = trained(&quick_config(), &["--scenes", "3"], &[]);
    for name in [CONFIG_FILE, VOCAB_FILE, METRICS_FILE, FINAL_CHECKPOINT, &epoch_checkpoint(1), &epoch_checkpoint(2)] {
        assert!(run.out.join(name).is_file(), "{name} missing");
    }
    let log = fs::read_to_string(run.out.join(METRICS_FILE)).unwrap();
    let steps: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(steps.len(), 6);
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s["event"], "step");
        assert_eq!(s["step"], i as u64);
        for key in ["llm", "mask_loc", "mask_seg", "total", "lr", "grad_norm"] {
            assert!(s[key].is_number(), "{key} missing");
        }
    }
    assert_eq!(RunConfig::load(run.out.join(CONFIG_FILE)).unwrap(), quick_config());
}

#[test]
fn no_loc_runs_log_no_location_term() {
    let run = trained(&quick_config(), &["--scenes", "2"], &["--no-loc"]);
    let log = fs::read_to_string(run.out.join(METRICS_FILE)).unwrap();
    assert!(!log.is_empty());
    assert!(!log.contains("mask_loc"));
    assert!(!RunConfig::load(run.out.join(CONFIG_FILE)).unwrap().include_loc);
}

#[test]
fn seed_comes_from_the_environment() {
    let root = TempDir::new().unwrap();
    let data = root.path().join("data");
    gendata(&data, &["--scenes", "1"]);
    let config = write_config(root.path(), &quick_config());
    let out = root.path().join("run");
    let args = ["train", "--config", p(&config), "--data", p(&data), "--out", p(&out)];
    ok(&reason3d_with_env(&args, &[("R3D_SEED", "77")]));
    assert_eq!(RunConfig::load(out.join(CONFIG_FILE)).unwrap().seed, 77);
}

#[test]
fn config_and_data_errors_exit_with_data_code() {
    let root = TempDir::new().unwrap();
    let data = root.path().join("data");
    gendata(&data, &["--scenes", "1"]);
    let bad = root.path().join("bad.toml");
    fs::write(&bad, "channels = 0\n").unwrap();
    let out = root.path().join("run");
    let res = reason3d(&["train", "--config", p(&bad), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(!out.exists(), "nothing is written before validation passes");
    let unknown = root.path().join("unknown.toml");
    fs::write(&unknown, "learning_rate = 1.0\n").unwrap();
    assert_eq!(reason3d(&["train", "--config", p(&unknown), "--data", p(&data), "--out", p(&out)]).status.code(), Some(3));
    let missing = root.path().join("nowhere");
    assert_eq!(reason3d(&["train", "--data", p(&missing), "--out", p(&out)]).status.code(), Some(3));
}

#[test]
fn resume_reproduces_the_next_steps_bit_exactly() {
    let run = trained(&quick_config(), &["--scenes", "3"], &[]);
    let resumed = run.out.with_file_name("resumed");
    ok(&reason3d(&[
        "train",
        "--config",
        p(&run.config),
        "--data",
        p(&run.data),
        "--out",
        p(&resumed),
        "--resume",
        p(&run.out.join(epoch_checkpoint(1))),
    ]));
    let full = fs::read_to_string(run.out.join(METRICS_FILE)).unwrap();
    let tail = fs::read_to_string(resumed.join(METRICS_FILE)).unwrap();
    let per_epoch = 3;
    let expected: Vec<&str> = full.lines().skip(per_epoch).collect();
    assert_eq!(tail.lines().collect::<Vec<_>>(), expected);
    assert_eq!(fs::read(run.out.join(FINAL_CHECKPOINT)).unwrap(), fs::read(resumed.join(FINAL_CHECKPOINT)).unwrap());
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let run = trained(&quick_config(), &["--scenes", "4", "--val-scenes", "2"], &[]);
    let (out, report) = eval_report(&run, &run.out.join(FINAL_CHECKPOINT), &["--predictions-from-gt"]);
    ok(&out);
    let r: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["miou"], 1.0);
    assert_eq!(r["acc_at_0.5"], 1.0);
    assert_eq!(r["n_samples"], 6);
    assert_eq!(r["config_digest"], quick_config().digest());
}

#[test]
fn untrained_models_still_report_valid_json() {
    let cfg = RunConfig { total_steps: 1, warmup_steps: 0, lr_start: 0.0, lr_peak: 0.0, ..quick_config() };
    let run = trained(&cfg, &["--scenes", "3", "--val-scenes", "1"], &[]);
    let (out, report) = eval_report(&run, &run.out.join(FINAL_CHECKPOINT), &["--thresholds", "0.1,0.25,0.5"]);
    ok(&out);
    let r: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["n_samples"], 3);
    assert!(r["n_errors"].as_u64().unwrap() <= 3);
    for key in ["miou", "acc_at_0.1", "acc_at_0.25", "acc_at_0.5"] {
        assert!(r[key].is_number(), "{key} missing");
    }
}

#[test]
fn eval_refuses_a_foreign_config_unless_forced() {
    let run = trained(&quick_config(), &["--scenes", "2", "--val-scenes", "1"], &[]);
    let other = run.out.with_file_name("other.toml");
    RunConfig { seed: 123, ..quick_config() }.save(&other).unwrap();
    let ckpt = run.out.join(FINAL_CHECKPOINT);
    let (refused, report) = eval_report(&run, &ckpt, &["--config", p(&other)]);
    assert_eq!(refused.status.code(), Some(3));
    assert_eq!(error_event(&refused)["kind"], "digest_mismatch");
    assert!(!report.exists());
    let (forced, _) = eval_report(&run, &ckpt, &["--config", p(&other), "--force"]);
    ok(&forced);
}

#[test]
fn train_and_eval_are_byte_identical_across_runs() {
    let reports: Vec<(Vec<u8>, Vec<u8>, Vec<u8>)> = (0..2)
        .map(|_| {
            let run = trained(&quick_config(), &["--scenes", "3", "--val-scenes", "1"], &[]);
            let (out, report) = eval_report(&run, &run.out.join(FINAL_CHECKPOINT), &[]);
            ok(&out);
            (
                fs::read(report).unwrap(),
                fs::read(run.out.join(METRICS_FILE)).unwrap(),
                fs::read(run.out.join(FINAL_CHECKPOINT)).unwrap(),
            )
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

/// A run directory whose model always ends its answer immediately.
fn mute_model(dir: &Path) -> PathBuf {
    let cfg = quick_config();
    let mut model = Reason3D::new(cfg.clone(), vocabulary()).unwrap();
    let eos = model.vocab.eos();
    let bias = model.lm.head.bias;
    let mut b = model.store.value(bias).clone();
    b.data_mut()[eos] = 1e3;
    *model.store.value_mut(bias) = b;
    cfg.save(dir.join(CONFIG_FILE)).unwrap();
    model.vocab.save(dir.join(VOCAB_FILE)).unwrap();
    let ckpt = dir.join(FINAL_CHECKPOINT);
    model.checkpoint().save(&ckpt).unwrap();
    ckpt
}

#[test]
fn missing_seg_token_is_a_structured_runtime_error() {
    let root = TempDir::new().unwrap();
    let data = root.path().join("data");
    gendata(&data, &["--scenes", "1"]);
    let ckpt = mute_model(root.path());
    let out = root.path().join("mask.json");
    let res = reason3d(&[
        "infer",
        "--ckpt",
        p(&ckpt),
        "--scene",
        p(&data.join("points/scene_00000.r3dp")),
        "--query",
        "the red chair",
        "--task",
        "refer",
        "--emit-mask",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(4));
    let err = error_event(&res);
    assert_eq!(err["kind"], "no_seg_token");
    assert_eq!(err["exit_code"], 4);
    assert!(!out.exists());
}

#[test]
fn malformed_scenes_are_schema_errors_with_no_output() {
    let root = TempDir::new().unwrap();
    let ckpt = mute_model(root.path());
    let scene = root.path().join("broken.r3dp");
    fs::write(&scene, b"not a point file").unwrap();
    let out = root.path().join("mask.json");
    let res = reason3d(&[
        "infer", "--ckpt", p(&ckpt), "--scene", p(&scene), "--query", "x", "--emit-mask", p(&out),
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(error_event(&res)["kind"], "schema");
    assert!(!out.exists());
}

#[test]
fn overfit_single_sample_round_trip() {
    // A search sample: its location target is the whole room, which local
    // features can fit, unlike a radius ball around the object.
    let cfg = RunConfig { batch_size: 1, total_steps: 300, warmup_steps: 20, ..RunConfig::default() };
    let gen = ["--scenes", "1", "--tasks-per-scene", "1", "--task-mix", "search", "--seed", "3"];
    let run = trained(&cfg, &gen, &[]);
    let log = fs::read_to_string(run.out.join(METRICS_FILE)).unwrap();
    let totals: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["total"].as_f64().unwrap())
        .collect();
    let first = totals[0];
    let at_200 = totals[195..200].iter().sum::<f64>() / 5.0;
    assert!(first / at_200 >= 10.0, "loss only fell from {first} to {at_200} in 200 steps");

    let sample = read_index(&run.data).unwrap().remove(0);
    let out = run.out.join("mask.json");
    let res = reason3d(&[
        "infer",
        "--ckpt",
        p(&run.out.join(FINAL_CHECKPOINT)),
        "--scene",
        p(&run.data.join(&sample.points_file)),
        "--query",
        &sample.description,
        "--task",
        sample.task.name(),
        "--emit-mask",
        p(&out),
        "--emit-box",
    ]);
    ok(&res);
    assert_eq!(events(&res).last().unwrap()["event"], "infer");
    let result: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let n = result["n_points"].as_u64().unwrap() as usize;
    let mask: Vec<usize> = result["mask"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    let pred = mask_from_indices(n, &mask).unwrap();
    let gt = mask_from_indices(n, &sample.gt_object).unwrap();
    let score = iou(&pred, &gt).unwrap();
    assert!(score > 0.9, "IoU {score}, answer {}", result["answer"]);
    assert!(result["box"]["min"].is_array());
    assert_eq!(result["config_digest"], cfg.digest());
}
