//! Randomized read(write(x)) = x checks for every on-disk format.

use r3d_tensor::{Checkpoint, ParamStore, Tensor, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reason3d::langmodel::{Vocabulary, RESERVED};
use reason3d::pointcloud::PointCloud;
use reason3d::synthdata::{generate_corpus, write_dataset, Dataset, GenConfig};
use reason3d::Execution;

use super::oracle::SuiteResult;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Values exactly representable in the `f32` point format.
fn f32_value(rng: &mut impl Rng, lo: f32, hi: f32) -> f64 {
    f64::from(rng.random_range(lo..hi))
}

pub fn point_files(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().map_err(err)?;
    for case in 0..instances {
        let n = rng.random_range(1..200);
        let positions = (0..n).map(|_| [(); 3].map(|_| f32_value(&mut rng, -50.0, 50.0))).collect();
        let colors = (0..n).map(|_| [(); 3].map(|_| f32_value(&mut rng, 0.0, 1.0))).collect();
        let cloud = PointCloud::new(positions, colors).map_err(err)?;
        let mut bytes = Vec::new();
        cloud.write_to(&mut bytes).map_err(err)?;
        if PointCloud::from_bytes(&bytes).map_err(err)? != cloud {
            return Err(format!("case {case}: in-memory point round trip differs"));
        }
        let path = dir.path().join(format!("{case}.r3dp"));
        cloud.save(&path).map_err(err)?;
        if PointCloud::load(&path).map_err(err)? != cloud {
            return Err(format!("case {case}: file point round trip differs"));
        }
    }
    Ok(instances)
}

pub fn datasets(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let rooms = rng.random_range(1..4);
        let cfg = GenConfig {
            scenes: rng.random_range(1..5),
            rooms: (1, rooms),
            seed: rng.random(),
            tasks_per_scene: rng.random_range(1..4),
            ..GenConfig::default()
        };
        let cfg = GenConfig { val_scenes: rng.random_range(0..=cfg.scenes), ..cfg };
        let (scenes, samples) = generate_corpus(&cfg, Execution::Sequential).map_err(err)?;
        let dir = tempfile::tempdir().map_err(err)?;
        write_dataset(dir.path(), &scenes, &samples).map_err(err)?;
        let back = Dataset::open(dir.path()).map_err(err)?;
        if back.samples != samples {
            return Err(format!("case {case}: index round trip differs"));
        }
        for s in &back.samples {
            let scene = scenes.iter().find(|sc| sc.id == s.scene_id).ok_or("scene missing")?;
            if back.load_points(s).map_err(err)? != scene.cloud {
                return Err(format!("case {case}: points of {} differ", s.scene_id));
            }
        }
    }
    Ok(instances)
}

pub fn checkpoints(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().map_err(err)?;
    for case in 0..instances {
        let mut store = ParamStore::new();
        for p in 0..rng.random_range(1..6) {
            let shape: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..5)).collect();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let id = store.insert(format!("p{p}.w"), Tensor::new(shape, data).map_err(err)?).map_err(err)?;
            let param = store.get_mut(id);
            param.first_moment = param.value.map(|v| v * 1e-3);
            param.second_moment = param.value.map(|v| v * v);
            param.step = rng.random_range(0..10_000);
            if rng.random_bool(0.3) {
                store.set_trainable(id, Trainable::Frozen);
            }
        }
        let mut ckpt = Checkpoint::from_store(&store, &format!("{:016x}", rng.random::<u64>()));
        ckpt.set_meta("step", rng.random_range(0..1000) as f64);
        let path = dir.path().join(format!("{case}.ckpt"));
        ckpt.save(&path).map_err(err)?;
        let back = Checkpoint::load(&path).map_err(err)?;
        if back != ckpt {
            return Err(format!("case {case}: checkpoint file differs"));
        }
        let mut fresh = store.clone();
        for (_, p) in fresh.iter_mut() {
            p.value = p.value.map(|_| 0.0);
            p.step = 0;
        }
        back.restore_into(&mut fresh).map_err(err)?;
        for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
            if a.value != b.value || a.first_moment != b.first_moment || a.second_moment != b.second_moment || a.step != b.step {
                return Err(format!("case {case}: restored {} differs", a.name));
            }
        }
    }
    Ok(instances)
}

pub fn vocabularies(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().map_err(err)?;
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz[],.?'-éü".chars().collect();
    for case in 0..instances {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for _ in 0..rng.random_range(0..40) {
            let len = rng.random_range(1..8);
            let t: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        for i in (1..tokens.len()).rev() {
            tokens.swap(i, rng.random_range(0..=i));
        }
        let vocab = Vocabulary::from_tokens(tokens).map_err(err)?;
        if Vocabulary::from_text(&vocab.to_text()).map_err(err)? != vocab {
            return Err(format!("case {case}: vocabulary text differs"));
        }
        let path = dir.path().join(format!("{case}.txt"));
        vocab.save(&path).map_err(err)?;
        if Vocabulary::load(&path).map_err(err)? != vocab {
            return Err(format!("case {case}: vocabulary file differs"));
        }
    }
    Ok(instances)
}
