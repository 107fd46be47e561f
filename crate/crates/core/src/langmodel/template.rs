//! Conversation templates for each task and the token streams built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Vocabulary, LOC, SEG};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reasoning,
    Search,
    Refer,
    Qa,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Reasoning, Task::Search, Task::Refer, Task::Qa];

    pub fn name(self) -> &'static str {
        match self {
            Task::Reasoning => "reasoning",
            Task::Search => "search",
            Task::Refer => "refer",
            Task::Qa => "qa",
        }
    }

    /// Search answers must name the room with `[LOC]` before the object.
    pub fn demands_loc(self) -> bool {
        self == Task::Search
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

/// The human turn for `task`, ending with the assistant cue.
pub fn instruction_text(task: Task, description: &str) -> String {
    match task {
        Task::Reasoning => format!(
            "Human: <scene> can you segment the object in the scene with the following descriptions: {description}? Assistant:"
        ),
        Task::Search => format!(
            "Human: <scene> can you segment the object based on the description: {description}? Please segment the target room first, then output the object mask. Assistant:"
        ),
        Task::Refer => format!("Human: <scene> please segment the object from the given scene: {description}. Assistant:"),
        Task::Qa => format!(
            "Human: <scene> please answer the question based on the given scene: {description} and output the related segmentation mask. Assistant:"
        ),
    }
}

/// The assistant turn for `task`; `qa_answer` is only used by [`Task::Qa`].
pub fn answer_text(task: Task, qa_answer: &str) -> String {
    match task {
        Task::Reasoning => format!("Sure, it's {SEG}."),
        Task::Search => format!("Sure, the room is {LOC}, and the object is {SEG}."),
        Task::Refer => format!("It's {SEG}."),
        Task::Qa => format!("{qa_answer} {SEG}."),
    }
}

/// Places `[LOC]` directly before `[SEG]` when the answer has none, so every
/// task can carry a location prompt.
pub fn with_location_token(answer: &str) -> String {
    if tokenize(answer).iter().any(|t| t == LOC) {
        return answer.to_string();
    }
    answer.replacen(SEG, &format!("{LOC} {SEG}"), 1)
}

/// Whole conversation text for a task.
pub fn conversation_text(task: Task, description: &str, qa_answer: &str) -> String {
    format!("{} {}", instruction_text(task, description), answer_text(task, qa_answer))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Instruction,
    Answer,
}

/// `[BOS] instruction answer [EOS]` as ids with a role per position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(vocab: &Vocabulary, instruction: &str, answer: Option<&str>) -> Result<Self> {
        let mut ids = vec![vocab.bos()];
        ids.extend(vocab.encode(instruction)?);
        let mut roles = vec![Role::Instruction; ids.len()];
        if let Some(answer) = answer {
            let body = vocab.encode(answer)?;
            let seg = body.iter().filter(|&&t| t == vocab.seg()).count();
            let loc = body.iter().filter(|&&t| t == vocab.loc()).count();
            if seg > 1 || loc > 1 {
                return Err(Error::Invalid(format!("answer {answer:?} repeats a special token")));
            }
            ids.extend(body);
            ids.push(vocab.eos());
            roles.resize(ids.len(), Role::Answer);
        }
        Ok(Self { ids, roles })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the first answer position, or `len()` when there is none.
    pub fn answer_start(&self) -> usize {
        self.roles.iter().position(|r| *r == Role::Answer).unwrap_or(self.ids.len())
    }

    pub fn answer_ids(&self) -> &[usize] {
        &self.ids[self.answer_start()..]
    }

    /// Position of `token` within the answer, as an index into `ids`.
    pub fn find_in_answer(&self, token: usize) -> Option<usize> {
        let start = self.answer_start();
        self.ids[start..].iter().position(|&t| t == token).map(|p| p + start)
    }
}
