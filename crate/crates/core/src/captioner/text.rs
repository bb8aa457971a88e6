//! Caption text pipeline: normalization, a word-level vocabulary with
//! pad/bos/eos/unk specials, and round-trip tokenization.

use std::collections::BTreeSet;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')', '-'];

/// Lowercase, strip punctuation, split on whitespace.
pub fn normalize_words(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .filter(|c| !PUNCTUATION.contains(c))
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextVocab {
    /// Words in id order, specials first.
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

impl TextVocab {
    /// Vocabulary over all words of the given captions, ids dense from 0
    /// with the four specials first and words sorted for determinism.
    pub fn build<I: IntoIterator<Item = impl AsRef<str>>>(captions: I) -> Self {
        let mut seen = BTreeSet::new();
        for caption in captions {
            for w in normalize_words(caption.as_ref()) {
                seen.insert(w);
            }
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(seen);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Normalized caption → ids; unknown words map to unk. Errors on a
    /// caption that is empty after normalization.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        let words = normalize_words(caption);
        if words.is_empty() {
            return Err(Error::Data(format!(
                "caption {caption:?} is empty after normalization"
            )));
        }
        Ok(words
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect())
    }

    /// Ids → space-joined words, skipping specials.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIALS.len())
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_words("A Dog barks!"), vec!["a", "dog", "barks"]);
        assert_eq!(normalize_words("it's half-done."), vec!["its", "halfdone"]);
    }

    #[test]
    fn round_trip_for_in_vocab_text() {
        let vocab = TextVocab::build(["a dog barks", "the cat;"]);
        let s = "A dog Barks!";
        let ids = vocab.tokenize(s).unwrap();
        assert_eq!(vocab.detokenize(&ids), "a dog barks");
    }

    #[test]
    fn vocab_size_counts_distinct_words_plus_specials() {
        let vocab = TextVocab::build(["a dog", "a cat"]);
        // {a, dog, cat} + 4 specials
        assert_eq!(vocab.len(), 3 + 4);
    }

    #[test]
    fn unknown_words_become_unk() {
        let vocab = TextVocab::build(["a dog"]);
        let ids = vocab.tokenize("a zebra").unwrap();
        assert_eq!(ids[1], UNK);
    }

    #[test]
    fn empty_after_stripping_is_an_error() {
        let vocab = TextVocab::build(["a dog"]);
        assert!(vocab.tokenize("!?.,").is_err());
    }

    #[test]
    fn specials_are_distinct_and_dense() {
        let vocab = TextVocab::build(["x"]);
        assert_eq!(vocab.word(PAD), Some("<pad>"));
        assert_eq!(vocab.word(BOS), Some("<bos>"));
        assert_eq!(vocab.word(EOS), Some("<eos>"));
        assert_eq!(vocab.word(UNK), Some("<unk>"));
        assert_eq!(vocab.id("x"), Some(4));
    }
}
