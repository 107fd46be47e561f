//! Corpus generation and the on-disk dataset layout:
//!
//! ```text
//! <dir>/index.jsonl          one Sample per line
//! <dir>/points/<scene>.r3dp  one point file per scene
//! <dir>/manifest.json        counts and a content digest
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sample::{generate_sample, Sample, Split, FORMAT_VERSION};
use super::scene::{generate_scene, Scene, SceneParams};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::langmodel::Task;
use crate::pointcloud::PointCloud;

pub const INDEX_FILE: &str = "index.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const POINTS_DIR: &str = "points";

/// Attempts per scene before giving up on finding a usable target.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub scenes: usize,
    /// Inclusive range of rooms per scene.
    pub rooms: (usize, usize),
    pub objects_per_room: usize,
    pub points_per_object: usize,
    pub seed: u64,
    /// Scene `i` receives tasks `task_mix[(i + j) % len]` for
    /// `j < tasks_per_scene`, one sample each.
    pub task_mix: Vec<Task>,
    pub tasks_per_scene: usize,
    /// The last `val_scenes` scenes form the validation split.
    pub val_scenes: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            rooms: (1, 1),
            objects_per_room: 3,
            points_per_object: 80,
            seed: 0,
            task_mix: vec![Task::Reasoning, Task::Search, Task::Refer],
            tasks_per_scene: 3,
            val_scenes: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rooms.0 == 0 || self.rooms.0 > self.rooms.1 {
            return Err(Error::Invalid(format!("bad room range {}-{}", self.rooms.0, self.rooms.1)));
        }
        if self.task_mix.is_empty() || self.task_mix.contains(&Task::Qa) {
            return Err(Error::Invalid("task mix must list reasoning, search or refer tasks".into()));
        }
        if self.tasks_per_scene == 0 {
            return Err(Error::Invalid("tasks per scene must be at least 1".into()));
        }
        if self.val_scenes > self.scenes {
            return Err(Error::Invalid(format!(
                "{} validation scenes out of {}",
                self.val_scenes, self.scenes
            )));
        }
        Ok(())
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Generates scene `index` and its samples. Everything derives from
/// `(seed, index)`, so scenes can be produced in any order. A scene lacking an
/// unambiguous target for one of its tasks is redrawn.
pub fn generate_entry(cfg: &GenConfig, index: usize) -> Result<(Scene, Vec<Sample>)> {
    let tasks: Vec<Task> = (0..cfg.tasks_per_scene)
        .map(|j| cfg.task_mix[(index + j) % cfg.task_mix.len()])
        .collect();
    let split = if index + cfg.val_scenes >= cfg.scenes { Split::Val } else { Split::Train };
    let id = scene_id(index);
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((index as u64) << 8) | attempt);
        let params = SceneParams {
            n_rooms: rng.random_range(cfg.rooms.0..=cfg.rooms.1),
            objects_per_room: cfg.objects_per_room,
            points_per_object: cfg.points_per_object,
            ..SceneParams::default()
        };
        let scene = generate_scene(&mut rng, &id, &params)?;
        let drawn: Result<Vec<Sample>> = tasks.iter().map(|&t| generate_sample(&scene, t, split, &mut rng)).collect();
        match drawn {
            Ok(samples) => return Ok((scene, samples)),
            Err(e @ Error::NoUnambiguousTarget(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt ran"))
}

pub fn generate_corpus(cfg: &GenConfig, exec: Execution) -> Result<(Vec<Scene>, Vec<Sample>)> {
    cfg.validate()?;
    let entries = exec.map_range(cfg.scenes, |i| generate_entry(cfg, i));
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut samples = Vec::with_capacity(cfg.scenes * cfg.tasks_per_scene);
    for e in entries {
        let (scene, drawn) = e?;
        scenes.push(scene);
        samples.extend(drawn);
    }
    Ok((scenes, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n_scenes: usize,
    pub n_samples: usize,
    pub tasks: BTreeMap<String, usize>,
    pub splits: BTreeMap<String, usize>,
    /// SHA-256 over the index and every point file, in name order.
    pub digest: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("writing to a String cannot fail");
        s
    })
}

pub fn index_text(samples: &[Sample]) -> Result<String> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&serde_json::to_string(s).map_err(|e| Error::Schema(e.to_string()))?);
        text.push('\n');
    }
    Ok(text)
}

/// Digest of a dataset directory's index and point files.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(fs::read(dir.join(INDEX_FILE))?);
    let points = dir.join(POINTS_DIR);
    if points.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&points)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for path in names {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            hasher.update(name.as_bytes());
            hasher.update(fs::read(&path)?);
        }
    }
    Ok(hex(&hasher.finalize()))
}

pub fn write_dataset(dir: &Path, scenes: &[Scene], samples: &[Sample]) -> Result<Manifest> {
    fs::create_dir_all(dir.join(POINTS_DIR))?;
    for scene in scenes {
        scene.cloud.save(dir.join(POINTS_DIR).join(format!("{}.r3dp", scene.id)))?;
    }
    fs::write(dir.join(INDEX_FILE), index_text(samples)?)?;
    let mut tasks = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for s in samples {
        *tasks.entry(s.task.to_string()).or_insert(0) += 1;
        let split = if s.split == Split::Train { "train" } else { "val" };
        *splits.entry(split.to_string()).or_insert(0) += 1;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        n_scenes: scenes.len(),
        n_samples: samples.len(),
        tasks,
        splits,
        digest: dataset_digest(dir)?,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Parses `index.jsonl`; point files are checked when loaded.
pub fn read_index(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let s: Sample = serde_json::from_str(line)
                .map_err(|e| Error::Schema(format!("{}:{}: {e}", INDEX_FILE, n + 1)))?;
            if s.format_version != FORMAT_VERSION {
                return Err(Error::Schema(format!(
                    "{}:{}: format version {} (expected {FORMAT_VERSION})",
                    INDEX_FILE,
                    n + 1,
                    s.format_version
                )));
            }
            Ok(s)
        })
        .collect()
}

/// A dataset directory with its samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let samples = read_index(&dir)?;
        Ok(Self { dir, samples })
    }

    pub fn load_points(&self, sample: &Sample) -> Result<PointCloud> {
        let path = self.dir.join(&sample.points_file);
        let bytes = fs::read(&path).map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
        let cloud = PointCloud::from_bytes(&bytes)?;
        sample.validate(cloud.len())?;
        Ok(cloud)
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}
