//! Word-level tokenizer and vocabulary with reserved control tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const LOC: &str = "[LOC]";
pub const SEG: &str = "[SEG]";
pub const RESERVED: [&str; 5] = [PAD, BOS, EOS, LOC, SEG];

const PUNCTUATION: [char; 5] = [',', '.', '?', ':', '!'];

/// Splits on whitespace and peels trailing punctuation into separate tokens.
/// Case is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let core = word.trim_end_matches(PUNCTUATION);
        if !core.is_empty() {
            out.push(core.to_string());
        }
        out.extend(word[core.len()..].chars().map(String::from));
    }
    out
}

fn is_punctuation(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCTUATION.contains(&c))
}

/// Joins tokens with single spaces, attaching punctuation to its left neighbour.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !is_punctuation(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then every token of `texts` in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for text in texts {
            for tok in tokenize(text) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len());
                    tokens.push(tok);
                }
            }
        }
        Self { tokens, index }
    }

    /// Vocabulary from an explicit id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Schema(format!("vocabulary line {i} holds {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Schema(format!("token {t:?} appears twice")));
            }
        }
        for r in RESERVED {
            if !index.contains_key(r) {
                return Err(Error::Schema(format!("vocabulary lacks reserved token {r}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn loc(&self) -> usize {
        self.index[LOC]
    }

    pub fn seg(&self) -> usize {
        self.index[SEG]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text for `ids`; reserved tokens other than `[LOC]`/`[SEG]` are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let t = self
                .token(id)
                .ok_or_else(|| Error::Invalid(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if !matches!(t, PAD | BOS | EOS) {
                words.push(t);
            }
        }
        Ok(detokenize(&words))
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::from_tokens(body.split('\n').map(String::from).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
