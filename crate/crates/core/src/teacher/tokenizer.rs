//! Word-level tokenizer for the mini teacher.
//!
//! Special ids are reserved below all word ids: pad 0, bos 1, eos 2, unk 3.
//! The vocabulary is the sorted set of lowercased words from a corpus, so it
//! is deterministic for a given corpus.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const FIRST_WORD_ID: usize = 4;

pub const DEFAULT_MAX_LENGTH: usize = 16;

/// A bos-prefixed, eos-suffixed id sequence padded to the tokenizer's
/// `max_length`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Position of the first eos token.
    pub fn eos_pos(&self) -> usize {
        self.ids
            .iter()
            .position(|&id| id == EOS)
            .expect("token sequences always carry an eos")
    }

    /// True for every non-pad position.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD).collect()
    }

    /// The word ids strictly between bos and the first eos.
    pub fn content_ids(&self) -> &[usize] {
        &self.ids[1..self.eos_pos()]
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub max_length: usize,
}

fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

impl Tokenizer {
    /// Build the vocabulary from a text corpus (sorted unique words).
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>, max_length: usize) -> Self {
        let mut words: Vec<String> = corpus
            .into_iter()
            .flat_map(|t| normalize_words(t))
            .collect();
        words.sort_unstable();
        words.dedup();
        Self::from_words(words, max_length)
    }

    /// Rebuild from an id-ordered word list (checkpoint loading).
    pub fn from_words(words: Vec<String>, max_length: usize) -> Self {
        assert!(max_length >= 3, "max_length must fit bos, eos and a word");
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i))
            .collect();
        Tokenizer {
            words,
            index,
            max_length,
        }
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_WORD_ID + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Hash identifying the vocabulary and max length, recorded in checkpoints.
    pub fn vocab_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.max_length.to_le_bytes());
        for w in &self.words {
            hasher.update(w.as_bytes());
            hasher.update([0u8]);
        }
        hex(&hasher.finalize())
    }

    fn word_id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Tokenize, truncating the word sequence if it would overflow.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut words = normalize_words(text);
        words.truncate(self.max_length - 2);
        self.sequence_from_words(&words)
    }

    /// Tokenize, erroring instead of truncating on overflow.
    pub fn tokenize_strict(&self, text: &str) -> Result<TokenSequence> {
        let words = normalize_words(text);
        if words.len() + 2 > self.max_length {
            return Err(Error::Length(format!(
                "\"{text}\" tokenizes to {} words; at most {} fit",
                words.len(),
                self.max_length - 2
            )));
        }
        Ok(self.sequence_from_words(&words))
    }

    fn sequence_from_words(&self, words: &[String]) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.max_length);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.word_id(w)));
        ids.push(EOS);
        ids.resize(self.max_length, PAD);
        TokenSequence { ids }
    }

    /// Recover the lowercased word sequence (unknown words as `<unk>`).
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.content_ids()
            .iter()
            .map(|&id| {
                if id >= FIRST_WORD_ID {
                    self.words[id - FIRST_WORD_ID].as_str()
                } else {
                    "<unk>"
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::from_corpus(
            ["a patch of normal lymph node", "tumor epithelium image"],
            DEFAULT_MAX_LENGTH,
        )
    }

    #[test]
    fn structure_of_a_tokenized_prompt() {
        let tok = toy();
        let seq = tok.tokenize("a patch of normal lymph node");
        assert_eq!(seq.ids.len(), DEFAULT_MAX_LENGTH);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(seq.eos_pos(), 7);
        assert_eq!(seq.content_ids().len(), 6);
        assert!(seq.ids[8..].iter().all(|&id| id == PAD));
        assert_eq!(tok.decode(&seq), "a patch of normal lymph node");
    }

    #[test]
    fn empty_text_is_bos_eos_pads() {
        let seq = toy().tokenize("");
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(seq.ids[1], EOS);
        assert!(seq.ids[2..].iter().all(|&id| id == PAD));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let seq = toy().tokenize("zzzunseenword");
        assert!(seq.ids.contains(&UNK));
    }

    #[test]
    fn strict_tokenize_rejects_overflow() {
        let tok = Tokenizer::from_corpus(["w"], 4);
        assert!(tok.tokenize_strict("w w").is_ok());
        assert!(matches!(tok.tokenize_strict("w w w"), Err(Error::Length(_))));
        // Non-strict truncation still ends with eos.
        let seq = tok.tokenize("w w w w w");
        assert_eq!(seq.ids.len(), 4);
        assert!(seq.ids.contains(&EOS));
    }

    #[test]
    fn vocab_is_sorted_and_hash_is_stable() {
        let t1 = toy();
        let t2 = Tokenizer::from_corpus(
            ["tumor epithelium image", "a patch of normal lymph node"],
            DEFAULT_MAX_LENGTH,
        );
        assert_eq!(t1.words(), t2.words());
        assert_eq!(t1.vocab_hash(), t2.vocab_hash());
        let mut sorted = t1.words().to_vec();
        sorted.sort();
        assert_eq!(t1.words(), sorted.as_slice());
    }
}
