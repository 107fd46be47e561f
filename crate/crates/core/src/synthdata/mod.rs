//! Procedural scenes, task samples and the dataset format.

pub mod dataset;
pub mod lexicon;
pub mod sample;
pub mod scene;

pub use dataset::{
    dataset_digest, generate_corpus, generate_entry, read_index, scene_id, write_dataset, Dataset, GenConfig, Manifest,
};
pub use sample::{descriptions_of, generate_sample, resolve, Sample, Split, FORMAT_VERSION};
pub use scene::{generate_scene, ObjectSpec, RoomSpec, Scene, SceneParams, SceneSpec};

use crate::langmodel::Vocabulary;

/// The vocabulary covering every template and lexicon word.
pub fn vocabulary() -> Vocabulary {
    let texts = lexicon::vocabulary_texts();
    Vocabulary::build(texts.iter().map(String::as_str))
}
