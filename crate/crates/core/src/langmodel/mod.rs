//! Tokenizer, templates, the causal language model and prompt extraction.

pub mod model;
pub mod prompt;
pub mod template;
pub mod vocab;

pub use model::{argmax, LanguageModel, LmOutput};
pub use prompt::{PromptEmbeddings, PromptProjection};
pub use template::{answer_text, conversation_text, instruction_text, with_location_token, Role, Task, TokenSequence};
pub use vocab::{detokenize, tokenize, Vocabulary, BOS, EOS, LOC, PAD, RESERVED, SEG};
