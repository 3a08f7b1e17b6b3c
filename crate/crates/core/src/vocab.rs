//! Whitespace vocabulary, sequence encoding and decoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::Example;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

/// Surface forms of the reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by `content` in order. Duplicates and special
    /// surface forms inside `content` are rejected.
    pub fn from_content<I, T>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= NUM_SPECIALS {
            return Err(Error::EmptyCorpus);
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary line {i} must be {s}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "invalid token {t:?} at id {i}"
                )));
            }
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-special tokens.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - NUM_SPECIALS
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// One token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::NotUtf8 {
            path: path.to_path_buf(),
        })?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// SHA-256 of the persisted form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

/// Frequency-ranked vocabulary over whitespace tokens. Ties are broken
/// lexicographically; the five specials always occupy ids 0..5.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if max_size <= NUM_SPECIALS {
        return Err(Error::InvalidArgument(format!(
            "max_size must exceed {NUM_SPECIALS}, got {max_size}"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for tok in line.as_ref().split_whitespace() {
            if !SPECIAL_TOKENS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Vocabulary::from_content(ranked.into_iter().map(|(t, _)| t))
}

/// `[cls, a…, sep, (b…, sep,) pad…]`, always exactly `max_len` long.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// 0 for cls/text_a/first sep and padding, 1 for text_b and its sep.
    pub segments: Vec<u8>,
    pub maskable: Vec<bool>,
}

impl TokenSequence {
    /// Builds a sequence from raw ids, deriving segments and maskability
    /// from the special-token layout.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let mut segments = Vec::with_capacity(ids.len());
        let mut seg = 0u8;
        for &id in &ids {
            segments.push(if id == PAD { 0 } else { seg });
            if id == SEP {
                seg = 1;
            }
        }
        let maskable = ids
            .iter()
            .map(|&id| !matches!(id, PAD | CLS | SEP))
            .collect();
        Self {
            ids,
            segments,
            maskable,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn maskable_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.maskable
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }

    /// Key positions that attention may read (everything but padding).
    pub fn attendable(&self) -> impl Iterator<Item = bool> + '_ {
        self.ids.iter().map(|&id| id != PAD)
    }
}

/// Encodes an example. Unknown tokens map to unk; over-long inputs keep
/// their leading tokens.
pub fn encode(example: &Example, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 4, "max_len must be at least 4");
    let a: Vec<usize> = example
        .text_a
        .split_whitespace()
        .map(|t| vocab.id(t))
        .collect();
    let b: Option<Vec<usize>> = example
        .text_b
        .as_ref()
        .map(|t| t.split_whitespace().map(|w| vocab.id(w)).collect());
    let specials = if b.is_some() { 3 } else { 2 };
    let mut budget = max_len - specials;
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS);
    segments.push(0);
    let take_a = a.len().min(budget);
    budget -= take_a;
    ids.extend_from_slice(&a[..take_a]);
    ids.push(SEP);
    segments.resize(ids.len(), 0);
    if let Some(b) = b {
        let take_b = b.len().min(budget);
        ids.extend_from_slice(&b[..take_b]);
        ids.push(SEP);
        segments.resize(ids.len(), 1);
    }
    let maskable = ids
        .iter()
        .map(|&id| !matches!(id, CLS | SEP))
        .collect::<Vec<_>>();
    let mut seq = TokenSequence {
        ids,
        segments,
        maskable,
    };
    seq.ids.resize(max_len, PAD);
    seq.segments.resize(max_len, 0);
    seq.maskable.resize(max_len, false);
    seq
}

/// Decodes ids, dropping specials and joining with single spaces.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        if !Vocabulary::is_special(id) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
