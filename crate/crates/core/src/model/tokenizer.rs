// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whitespace tokenizer over a fixed vocabulary file.
//!
//! Trailing punctuation (`,` `.` `;` `:` `!` `?`) is split off into its own
//! token so that template text such as `"married, as a result,"` tokenizes
//! the same way regardless of spacing.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{DemError, Result};

pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const EOT: &str = "<eot>";

const PUNCT: &[char] = &[',', '.', ';', ':', '!', '?'];

/// Fixed vocabulary; line number in the vocabulary file is the token id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: TokenId,
    eot: TokenId,
}

/// Splits text into word and punctuation pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let trimmed = word.trim_end_matches(PUNCT);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        for c in word[trimmed.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

impl Vocabulary {
    /// Builds a vocabulary from distinct tokens. `<unk>` and `<eot>` are
    /// required.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DemError::InvalidInput(format!(
                    "vocabulary entry {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(DemError::InvalidInput(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let unk = *index
            .get(UNK)
            .ok_or_else(|| DemError::InvalidInput(format!("vocabulary lacks {UNK}")))?;
        let eot = *index
            .get(EOT)
            .ok_or_else(|| DemError::InvalidInput(format!("vocabulary lacks {EOT}")))?;
        Ok(Self {
            tokens,
            index,
            unk,
            eot,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn eot(&self) -> TokenId {
        self.eot
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes text; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(self.unk))
            .collect()
    }

    /// Encodes text, failing on the first out-of-vocabulary word.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<TokenId>> {
        split_words(text)
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| DemError::InvalidInput(format!("word `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Joins tokens with spaces, attaching punctuation to the previous word.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            let is_punct = tok.chars().count() == 1 && tok.starts_with(PUNCT);
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}
