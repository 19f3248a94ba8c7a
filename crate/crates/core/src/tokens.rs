//! Vocabulary, token sequences and prompts.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`Vocab`].
pub type TokenId = u32;

/// Symbol used for the end-of-sequence token when a vocabulary is built
/// from content symbols alone.
pub const DEFAULT_EOS: &str = "</s>";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("duplicate symbol {0:?} in vocabulary")]
    Duplicate(String),
    #[error("eos id {eos} out of range for vocabulary of size {size}")]
    EosOutOfRange { eos: usize, size: usize },
    #[error("vocabulary needs at least one content token plus EOS, got {0} symbols")]
    TooSmall(usize),
    #[error("unknown token {0:?}")]
    UnknownSymbol(String),
    #[error("token id {0} is not a content token")]
    InvalidId(TokenId),
}

/// An ordered set of distinct symbols with one reserved end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    eos: TokenId,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>, eos_id: usize) -> Result<Self, VocabError> {
        if symbols.len() < 2 {
            return Err(VocabError::TooSmall(symbols.len()));
        }
        if eos_id >= symbols.len() {
            return Err(VocabError::EosOutOfRange {
                eos: eos_id,
                size: symbols.len(),
            });
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), id as TokenId).is_some() {
                return Err(VocabError::Duplicate(s.clone()));
            }
        }
        Ok(Self {
            symbols,
            eos: eos_id as TokenId,
            index,
        })
    }

    /// Builds a vocabulary from content symbols, appending [`DEFAULT_EOS`] last.
    pub fn from_content<I, S>(content: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut symbols: Vec<String> = content.into_iter().map(Into::into).collect();
        let eos = symbols.len();
        symbols.push(DEFAULT_EOS.to_string());
        Self::new(symbols, eos)
    }

    /// Total number of symbols, EOS included.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of non-EOS symbols.
    pub fn content_len(&self) -> usize {
        self.symbols.len() - 1
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    /// Content token ids in ascending order.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.symbols.len() as TokenId).filter(move |&t| t != self.eos)
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (id as usize) < self.symbols.len() && id != self.eos
    }

    pub fn check(&self, seq: &[TokenId]) -> Result<(), VocabError> {
        match seq.iter().find(|&&t| !self.is_content(t)) {
            Some(&bad) => Err(VocabError::InvalidId(bad)),
            None => Ok(()),
        }
    }

    /// Splits on whitespace and maps every word to a content token.
    pub fn encode(&self, text: &str) -> Result<Sequence, VocabError> {
        text.split_whitespace()
            .map(|w| match self.id(w) {
                Some(id) if id != self.eos => Ok(id),
                _ => Err(VocabError::UnknownSymbol(w.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Sequence::from)
    }

    pub fn decode(&self, seq: &[TokenId]) -> Vec<String> {
        seq.iter()
            .map(|&t| self.symbol(t).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// Space-joined rendering of a sequence.
    pub fn render(&self, seq: &[TokenId]) -> String {
        self.decode(seq).join(" ")
    }
}

/// A finite token string. EOS is never stored; termination is implicit.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence(Vec<TokenId>);

impl Sequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    /// `prefix ‖ suffix`
    pub fn concat(prefix: &[TokenId], suffix: &[TokenId]) -> Self {
        let mut v = Vec::with_capacity(prefix.len() + suffix.len());
        v.extend_from_slice(prefix);
        v.extend_from_slice(suffix);
        Self(v)
    }
}

impl Deref for Sequence {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for Sequence {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl From<&[TokenId]> for Sequence {
    fn from(v: &[TokenId]) -> Self {
        Self(v.to_vec())
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Conditioning input for a language model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    /// Token prompt over the model's own vocabulary; may be empty.
    Tokens(Sequence),
    /// Opaque text, used by remote backends.
    Text(String),
}

impl Prompt {
    pub fn empty() -> Self {
        Prompt::Tokens(Sequence::empty())
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Prompt::Tokens(s) => s.is_empty(),
            Prompt::Text(t) => t.trim().is_empty(),
        }
    }

    /// Text rendering, decoding token prompts through `vocab`.
    pub fn render(&self, vocab: &Vocab) -> String {
        match self {
            Prompt::Tokens(s) => vocab.render(s),
            Prompt::Text(t) => t.clone(),
        }
    }
}
