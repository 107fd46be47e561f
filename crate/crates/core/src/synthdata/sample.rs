//! Task samples drawn from a scene, and a brute-force resolver that checks
//! each description picks out exactly one object.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{
    affords, refer_description, search_description, reasoning_description, AFFORDANCES, FRAMES, ROOM_TYPES,
};
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::langmodel::{answer_text, instruction_text, Task};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One instruction over one scene with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub format_version: u32,
    pub scene_id: String,
    pub task: Task,
    pub instruction: String,
    pub answer: String,
    pub description: String,
    /// Path of the point file relative to the dataset directory.
    pub points_file: String,
    /// Sorted indices of the target object's points.
    pub gt_object: Vec<usize>,
    /// Sorted indices of every point of the room holding the target.
    pub gt_region: Vec<usize>,
    pub room_type: String,
    pub split: Split,
}

impl Sample {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "sample format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (name, set) in [("gt_object", &self.gt_object), ("gt_region", &self.gt_region)] {
            if set.is_empty() {
                return Err(Error::Schema(format!("{}: {name} is empty", self.scene_id)));
            }
            if !set.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Schema(format!("{}: {name} is not strictly sorted", self.scene_id)));
            }
            if set.last().is_some_and(|&i| i >= n_points) {
                return Err(Error::Schema(format!("{}: {name} indexes past {n_points} points", self.scene_id)));
            }
        }
        Ok(())
    }
}

/// All descriptions under which `object` may be queried for `task`.
pub fn descriptions_of(scene: &Scene, object: usize, task: Task) -> Vec<String> {
    let obj = &scene.spec.objects[object];
    let room_type = scene.spec.rooms[obj.room].room_type;
    let mut out = Vec::new();
    match task {
        Task::Reasoning | Task::Search => {
            for (a, aff) in AFFORDANCES.iter().enumerate() {
                if !affords(aff, obj.category) {
                    continue;
                }
                for f in 0..FRAMES.len() {
                    out.push(if task == Task::Search {
                        search_description(f, a, room_type)
                    } else {
                        reasoning_description(f, a)
                    });
                }
            }
        }
        Task::Refer => out.push(refer_description(obj.color, obj.category)),
        Task::Qa => {}
    }
    out
}

/// Objects of `scene` matching `description` under `task`.
pub fn resolve(scene: &Scene, task: Task, description: &str) -> Vec<usize> {
    (0..scene.spec.objects.len())
        .filter(|&o| descriptions_of(scene, o, task).iter().any(|d| d == description))
        .collect()
}

struct Candidate {
    object: usize,
    description: String,
    /// Another room holds an object the same phrase would pick out.
    has_distractor: bool,
}

fn candidates(scene: &Scene, task: Task) -> Vec<Candidate> {
    let objects = &scene.spec.objects;
    let mut out = Vec::new();
    for (o, obj) in objects.iter().enumerate() {
        match task {
            Task::Reasoning | Task::Search => {
                for (a, aff) in AFFORDANCES.iter().enumerate() {
                    if !affords(aff, obj.category) {
                        continue;
                    }
                    let matching: Vec<usize> = (0..objects.len()).filter(|&p| affords(aff, objects[p].category)).collect();
                    let same_room = matching.iter().filter(|&&p| objects[p].room == obj.room).count();
                    let unique = if task == Task::Search { same_room == 1 } else { matching.len() == 1 };
                    if !unique {
                        continue;
                    }
                    for f in 0..FRAMES.len() {
                        let description = if task == Task::Search {
                            search_description(f, a, scene.spec.rooms[obj.room].room_type)
                        } else {
                            reasoning_description(f, a)
                        };
                        out.push(Candidate {
                            object: o,
                            description,
                            has_distractor: matching.len() > same_room,
                        });
                    }
                }
            }
            Task::Refer => {
                let twins = objects
                    .iter()
                    .filter(|p| p.color == obj.color && p.category == obj.category)
                    .count();
                if twins == 1 {
                    out.push(Candidate {
                        object: o,
                        description: refer_description(obj.color, obj.category),
                        has_distractor: false,
                    });
                }
            }
            Task::Qa => {}
        }
    }
    out
}

/// Draws one unambiguous sample of `task` from `scene`. Search samples prefer
/// targets whose phrase also matches an object in another room.
pub fn generate_sample(scene: &Scene, task: Task, split: Split, rng: &mut impl Rng) -> Result<Sample> {
    if task == Task::Qa {
        return Err(Error::NoUnambiguousTarget("question answering samples are not generated".into()));
    }
    let all = candidates(scene, task);
    let preferred: Vec<&Candidate> = all.iter().filter(|c| c.has_distractor).collect();
    let pool: Vec<&Candidate> = if task == Task::Search && !preferred.is_empty() {
        preferred
    } else {
        all.iter().collect()
    };
    let chosen = pool
        .choose(rng)
        .ok_or_else(|| Error::NoUnambiguousTarget(format!("{}: no {task} target", scene.id)))?;
    let obj = &scene.spec.objects[chosen.object];
    Ok(Sample {
        format_version: FORMAT_VERSION,
        scene_id: scene.id.clone(),
        task,
        instruction: instruction_text(task, &chosen.description),
        answer: answer_text(task, ""),
        description: chosen.description.clone(),
        points_file: format!("points/{}.r3dp", scene.id),
        gt_object: scene.object_points[chosen.object].clone(),
        gt_region: scene.room_points[obj.room].clone(),
        room_type: ROOM_TYPES[scene.spec.rooms[obj.room].room_type].0.to_string(),
        split,
    })
}
