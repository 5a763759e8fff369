//! Closed whitespace-token vocabulary and token sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Special token ids carried by every vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: usize,
    pub eos: usize,
    pub sep: usize,
    pub pad: usize,
    /// Sentence terminator; maps to the surface token ".".
    pub period: usize,
}

/// An ordered, closed vocabulary over whitespace tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub special: SpecialIds,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        // The index is derived from tokens and excluded on purpose.
        self.tokens == other.tokens && self.special == other.special
    }
}
impl Eq for Vocab {}

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const SEP_TOKEN: &str = "<sep>";
pub const PAD_TOKEN: &str = "<pad>";
pub const PERIOD_TOKEN: &str = ".";

impl Vocab {
    /// Builds a vocabulary from regular surface tokens. The four marker
    /// tokens and the sentence terminator are inserted up front.
    pub fn new(surface: impl IntoIterator<Item = String>) -> Vocab {
        let mut tokens = vec![
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
            PAD_TOKEN.to_string(),
            PERIOD_TOKEN.to_string(),
        ];
        for t in surface {
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        let special = SpecialIds {
            bos: 0,
            eos: 1,
            sep: 2,
            pad: 3,
            period: 4,
        };
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            special,
        }
    }

    /// Rebuilds the token index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        for tok in text.split_whitespace() {
            match self.id(tok) {
                Some(id) => ids.push(id),
                None => return Err(Error::UnknownToken(tok.to_string())),
            }
        }
        Ok(TokenSeq { ids })
    }

    pub fn decode(&self, seq: &TokenSeq) -> String {
        seq.ids
            .iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A sequence of token ids, each in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> TokenSeq {
        TokenSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        TokenSeq { ids }
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(ids: Vec<usize>) -> Self {
        TokenSeq { ids }
    }
}
