use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::TokenSequence;

use super::generate::CORPUS;

/// Beginning-of-sequence marker, always id 0.
pub const BOS: &str = "<bos>";

/// Deterministic toy vocabulary: `<bos>`, the corpus words in order of
/// first appearance, the remaining printable ASCII characters, then
/// `<tN>` fillers up to the requested size. Truncated when smaller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl ToyVocab {
    pub fn new(vocab_size: usize) -> Self {
        let mut tokens: Vec<String> = Vec::with_capacity(vocab_size);
        let mut index = HashMap::new();
        let mut push = |s: String, tokens: &mut Vec<String>| {
            if tokens.len() < vocab_size && !index.contains_key(&s) {
                index.insert(s.clone(), tokens.len());
                tokens.push(s);
            }
        };
        push(BOS.to_string(), &mut tokens);
        for sentence in CORPUS {
            for word in sentence.split_whitespace() {
                push(word.to_string(), &mut tokens);
            }
        }
        for c in '!'..='~' {
            push(c.to_string(), &mut tokens);
        }
        let mut n = tokens.len();
        while tokens.len() < vocab_size {
            push(format!("<t{n}>"), &mut tokens);
            n += 1;
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<?>", String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whitespace split; words outside the vocabulary fall back to one
    /// token per character.
    pub fn encode(&self, text: &str, with_bos: bool) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        if with_bos {
            ids.push(0);
        }
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                ids.push(id);
                continue;
            }
            for c in word.chars() {
                let id = self.id(&c.to_string()).ok_or_else(|| Error::UnknownWord(c.to_string()))?;
                ids.push(id);
            }
        }
        TokenSequence::new(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.token(id)).collect::<Vec<_>>().join(" ")
    }
}
