use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Parameter name of the trainable `V×d_text` embedding table.
pub const EMBED: &str = "tokenizer.embed";

/// Whitespace tokenizer over a fixed word list.
///
/// Tokens are lowercased and stripped of leading/trailing ASCII punctuation;
/// tokens that strip to nothing are dropped. Unknown words map to [`UNK_ID`].
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab_size: usize,
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn new(vocab_size: usize, words: &[String]) -> Result<Self> {
        if vocab_size < words.len() + 2 {
            return Err(Error::contract("vocabulary larger than vocab_size"));
        }
        let words: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + 2))
            .collect();
        Ok(Tokenizer {
            vocab_size,
            words,
            ids,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn normalize(token: &str) -> String {
        token
            .trim_matches(|c: char| c.is_ascii_punctuation())
            .to_lowercase()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(Self::normalize)
            .filter(|t| !t.is_empty())
            .map(|t| self.ids.get(&t).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match id {
                PAD_ID => "<pad>",
                UNK_ID => "<unk>",
                id => self.words.get(id - 2).map_or("<unk>", String::as_str),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
