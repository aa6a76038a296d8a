use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{PAD_ID, UNK_ID};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const DEFAULT_MIN_FREQ: usize = 5;

/// Token-to-id map with reserved `pad` (0) and `unk` (1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_freq: usize,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocabulary::from_tokens(f.tokens, f.min_freq)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.tokens,
            min_freq: v.min_freq,
        }
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(Error::Validation("vocabulary must start with the pad and unk tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Id of `token`, or the `unk` id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Hex SHA-256 over the id-ordered tokens.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Counts token frequencies over a corpus of token sequences.
pub fn count_tokens<'a, I, S>(corpus: I) -> BTreeMap<String, usize>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut freq = BTreeMap::new();
    for sentence in corpus {
        for t in sentence {
            *freq.entry(t.as_ref().to_string()).or_insert(0) += 1;
        }
    }
    freq
}

/// Tokens seen fewer than `min_freq` times map to `unk`; the rest get ids in
/// order of decreasing frequency, ties broken lexicographically.
pub fn build_vocab<'a, I, S>(corpus: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let freq = count_tokens(corpus);
    if freq.is_empty() {
        return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(&String, &usize)> = freq
        .iter()
        .filter(|(t, c)| **c >= min_freq && t.as_str() != PAD && t.as_str() != UNK)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![PAD.to_string(), UNK.to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t.clone()));
    Vocabulary::from_tokens(tokens, min_freq)
}
