//! Token dictionary and greedy longest-match subword tokenization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this (in characters) map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 64;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot read vocabulary: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary is empty")]
    Empty,
    #[error("duplicate token {token:?} on lines {first} and {second}")]
    Duplicate { token: String, first: usize, second: usize },
    #[error("special token {0} missing from vocabulary")]
    MissingSpecial(&'static str),
    #[error("vocabulary needs at least one non-special token")]
    NoRealTokens,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    pad: TokenId,
    unk: TokenId,
    mask: TokenId,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if let Some(prev) = index.insert(t.clone(), i as TokenId) {
                return Err(VocabError::Duplicate {
                    token: t.clone(),
                    first: prev as usize + 1,
                    second: i + 1,
                });
            }
        }
        let special = |name: &'static str| index.get(name).copied().ok_or(VocabError::MissingSpecial(name));
        let (pad, unk, mask) = (special(PAD)?, special(UNK)?, special(MASK)?);
        if tokens.len() < 4 {
            return Err(VocabError::NoRealTokens);
        }
        Ok(Self {
            tokens,
            index,
            pad,
            unk,
            mask,
        })
    }

    /// Reads one token per line; the zero-based line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Err(VocabError::Empty);
        }
        Self::from_tokens(body.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_text())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
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

    pub fn pad_id(&self) -> TokenId {
        self.pad
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.pad || id == self.unk || id == self.mask
    }

    /// Lowercases, splits on whitespace and punctuation, then decomposes
    /// each word by greedy longest-prefix match.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, TokenizeError> {
        let lowered = text.to_lowercase();
        let mut ids = Vec::new();
        for word in split_words(&lowered) {
            self.tokenize_word(word, &mut ids);
        }
        if ids.is_empty() {
            return Err(TokenizeError::EmptyQuery);
        }
        Ok(TokenSequence {
            ids,
            surface: text.to_string(),
        })
    }

    fn tokenize_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        if bounds.len() - 1 > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let start_len = out.len();
        let mut lookup = String::with_capacity(word.len() + 2);
        let mut start = 0;
        while start < bounds.len() - 1 {
            let mut matched = None;
            for end in (start + 1..bounds.len()).rev() {
                lookup.clear();
                if start > 0 {
                    lookup.push_str(CONTINUATION_PREFIX);
                }
                lookup.push_str(&word[bounds[start]..bounds[end]]);
                if let Some(&id) = self.index.get(lookup.as_str()) {
                    if !self.is_special(id) {
                        matched = Some((id, end));
                        break;
                    }
                }
            }
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(start_len);
                    out.push(self.unk);
                    return;
                }
            }
        }
    }

    /// Joins tokens with spaces, fusing `##` continuations onto the previous
    /// token. A leading continuation is rendered without its prefix and
    /// flagged.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<Detokenized, TokenizeError> {
        let mut text = String::new();
        let mut leading_continuation = false;
        for (i, &id) in ids.iter().enumerate() {
            let tok = self
                .token(id)
                .ok_or(TokenizeError::IdOutOfRange { id, size: self.len() })?;
            match tok.strip_prefix(CONTINUATION_PREFIX) {
                Some(rest) if !rest.is_empty() => {
                    if i == 0 {
                        leading_continuation = true;
                    }
                    text.push_str(rest);
                }
                _ => {
                    if i > 0 {
                        text.push(' ');
                    }
                    text.push_str(tok);
                }
            }
        }
        Ok(Detokenized {
            text,
            leading_continuation,
        })
    }
}

fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub surface: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub text: String,
    /// Set when the first token was a `##` continuation.
    pub leading_continuation: bool,
}
