//! Fixed vocabulary and tokenizer for conditioning prompts.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// The vocabulary, in token-id order.
pub const VOCABULARY: [&str; 32] = [
    "<unk>", "<eot>", "*", "a", "photo", "of", "masterpiece", "best", "quality", "realistic", "very", "clear",
    "professional", "3d", "cartoon", "anime", "sketches", "worst", "low", "face", "person", "portrait", "red", "hair",
    "high", "detailed", "blurry", "noisy", "sharp", "man", "woman", "the",
];

pub const UNK: usize = 0;
pub const EOT: usize = 1;
pub const STAR: usize = 2;
/// Word whose embedding initializes the learnable `*` token.
pub const STAR_INIT_WORD: &str = "face";

pub const POSITIVE_PROMPT: &str = "a Photo of * , masterpiece, best quality, realistic, very clear, professional";
pub const NEGATIVE_PROMPT: &str = "3d, cartoon, anime, sketches, worst quality, low quality";

pub fn token_id(word: &str) -> usize {
    VOCABULARY.iter().position(|w| *w == word).unwrap_or(UNK)
}

/// Token ids ending in exactly one end-of-text token, with at most one `*`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptTokens {
    ids: Vec<usize>,
}

impl PromptTokens {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCABULARY.len()) {
            return Err(Error::InvalidPrompt(format!("token id {bad} outside vocabulary")));
        }
        if ids.last() != Some(&EOT) || ids.iter().filter(|&&i| i == EOT).count() != 1 {
            return Err(Error::InvalidPrompt("prompt must end with exactly one end-of-text token".into()));
        }
        if ids.iter().filter(|&&i| i == STAR).count() > 1 {
            return Err(Error::InvalidPrompt("prompt may contain at most one `*`".into()));
        }
        Ok(Self { ids })
    }

    /// Lowercases, splits on whitespace and commas, maps unknown words to
    /// `<unk>` and appends the end-of-text token.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ids: Vec<usize> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|w| !w.is_empty())
            .map(|w| token_id(&w.to_lowercase()))
            .collect();
        ids.push(EOT);
        Self::new(ids)
    }

    pub fn positive() -> Self {
        Self::parse(POSITIVE_PROMPT).expect("built-in prompt parses")
    }

    pub fn negative() -> Self {
        Self::parse(NEGATIVE_PROMPT).expect("built-in prompt parses")
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn star_position(&self) -> Option<usize> {
        self.ids.iter().position(|&i| i == STAR)
    }

    pub fn eot_position(&self) -> usize {
        self.ids.len() - 1
    }
}
