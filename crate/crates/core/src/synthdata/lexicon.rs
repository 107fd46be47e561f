//! Fixed word lists: categories, colors, sizes, rooms and affordances.
//!
//! Colors come from the lattice `{0.1, 0.5, 0.9}³`. Attribute colors use no
//! 0.5 component, category signatures exactly one, room accents exactly two,
//! and the floor is the all-0.5 gray, so every color role is distinguishable
//! from a point's color alone.

use crate::langmodel::{conversation_text, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Box,
    Cylinder,
    Sphere,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Category {
    pub name: &'static str,
    pub shape: Shape,
    /// Footprint width, depth and height in meters at medium size.
    pub dims: [f64; 3],
    pub signature: [f64; 3],
}

pub const CATEGORIES: [Category; 10] = [
    Category { name: "chair", shape: Shape::Box, dims: [0.45, 0.45, 0.6], signature: [0.5, 0.1, 0.1] },
    Category { name: "sofa", shape: Shape::Box, dims: [0.7, 0.5, 0.45], signature: [0.5, 0.9, 0.1] },
    Category { name: "bed", shape: Shape::Box, dims: [0.7, 0.7, 0.35], signature: [0.5, 0.1, 0.9] },
    Category { name: "table", shape: Shape::Box, dims: [0.65, 0.65, 0.5], signature: [0.5, 0.9, 0.9] },
    Category { name: "desk", shape: Shape::Box, dims: [0.7, 0.45, 0.55], signature: [0.1, 0.5, 0.1] },
    Category { name: "lamp", shape: Shape::Cylinder, dims: [0.3, 0.3, 0.7], signature: [0.9, 0.5, 0.1] },
    Category { name: "bookshelf", shape: Shape::Box, dims: [0.6, 0.3, 0.7], signature: [0.1, 0.5, 0.9] },
    Category { name: "plant", shape: Shape::Sphere, dims: [0.45, 0.45, 0.45], signature: [0.9, 0.5, 0.9] },
    Category { name: "bin", shape: Shape::Cylinder, dims: [0.35, 0.35, 0.4], signature: [0.1, 0.1, 0.5] },
    Category { name: "television", shape: Shape::Box, dims: [0.65, 0.15, 0.45], signature: [0.9, 0.1, 0.5] },
];

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.9, 0.1]),
    ("blue", [0.1, 0.1, 0.9]),
    ("yellow", [0.9, 0.9, 0.1]),
    ("white", [0.9, 0.9, 0.9]),
    ("black", [0.1, 0.1, 0.1]),
];

pub const SIZES: [(&str, f64); 3] = [("small", 0.8), ("medium", 1.0), ("large", 1.2)];

pub const ROOM_TYPES: [(&str, [f64; 3]); 5] = [
    ("bedroom", [0.5, 0.5, 0.1]),
    ("kitchen", [0.5, 0.5, 0.9]),
    ("bathroom", [0.5, 0.1, 0.5]),
    ("office", [0.5, 0.9, 0.5]),
    ("living room", [0.1, 0.5, 0.5]),
];

pub const FLOOR_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// A verb phrase and the categories it picks out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affordance {
    pub phrase: &'static str,
    pub categories: &'static [&'static str],
}

pub const AFFORDANCES: [Affordance; 8] = [
    Affordance { phrase: "sit on", categories: &["chair", "sofa"] },
    Affordance { phrase: "sleep on", categories: &["bed", "sofa"] },
    Affordance { phrase: "put things on", categories: &["table", "desk"] },
    Affordance { phrase: "read under", categories: &["lamp"] },
    Affordance { phrase: "store books in", categories: &["bookshelf"] },
    Affordance { phrase: "water", categories: &["plant"] },
    Affordance { phrase: "throw trash in", categories: &["bin"] },
    Affordance { phrase: "watch shows on", categories: &["television"] },
];

/// Sentence frames for reasoning queries; `{}` takes the affordance phrase.
pub const FRAMES: [&str; 3] = ["the object you can {}", "something you can {}", "the thing that you can {}"];

pub fn category(name: &str) -> Option<usize> {
    CATEGORIES.iter().position(|c| c.name == name)
}

pub fn affords(affordance: &Affordance, category: usize) -> bool {
    affordance.categories.contains(&CATEGORIES[category].name)
}

pub fn reasoning_description(frame: usize, affordance: usize) -> String {
    FRAMES[frame].replace("{}", AFFORDANCES[affordance].phrase)
}

pub fn search_description(frame: usize, affordance: usize, room_type: usize) -> String {
    format!("{} in the {}", reasoning_description(frame, affordance), ROOM_TYPES[room_type].0)
}

pub fn refer_description(color: usize, category: usize) -> String {
    format!("the {} {}", COLORS[color].0, CATEGORIES[category].name)
}

/// Every text the tokenizer must cover: all templates and lexicon words.
pub fn vocabulary_texts() -> Vec<String> {
    let mut texts: Vec<String> = Task::ALL.iter().map(|&t| conversation_text(t, "", "")).collect();
    texts.push("[LOC] [SEG]".into());
    texts.extend(FRAMES.iter().map(|f| f.replace("{}", "")));
    texts.extend(AFFORDANCES.iter().map(|a| a.phrase.to_string()));
    texts.extend(CATEGORIES.iter().map(|c| c.name.to_string()));
    texts.extend(COLORS.iter().map(|c| c.0.to_string()));
    texts.extend(SIZES.iter().map(|s| s.0.to_string()));
    texts.extend(ROOM_TYPES.iter().map(|r| format!("in the {}", r.0)));
    texts
}
