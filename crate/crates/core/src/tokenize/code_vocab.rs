use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

use super::{parse_vocab, render_vocab, sha256_hex};

/// One token per diagnostic code.
///
/// Special ids are fixed: `PAD = 0`, `UNK = 1`, `CLS = 2`, `MASK = 3`. Codes
/// follow in order of descending count, ties broken by code string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_frequency: Option<usize>,
}

pub(crate) const CODE_SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

impl CodeVocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const MASK: u32 = 3;
    pub const NUM_SPECIAL: u32 = 4;

    fn from_tokens(tokens: Vec<String>, min_frequency: Option<usize>) -> Result<Self> {
        for (i, s) in CODE_SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocab(format!("special token {s} must have id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(CodeVocab { tokens, index, min_frequency })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `code`, or `UNK`.
    pub fn lookup(&self, code: &str) -> u32 {
        self.index.get(code).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < Self::NUM_SPECIAL
    }

    /// Codes (non-special tokens) in id order.
    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.tokens[Self::NUM_SPECIAL as usize..].iter().map(String::as_str)
    }

    /// Cutoff used at build time; `None` for a vocabulary read from disk.
    pub fn min_frequency(&self) -> Option<usize> {
        self.min_frequency
    }

    pub fn to_file_string(&self) -> String {
        render_vocab(&self.tokens)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(parse_vocab(&text, &path.display().to_string())?, None)
    }
}

/// Builds a code vocabulary from `(code, count)` pairs. Repeated codes have
/// their counts summed; codes below `min_frequency` map to `UNK`.
pub fn build_code_vocab<S: AsRef<str>>(counts: &[(S, usize)], min_frequency: usize) -> Result<CodeVocab> {
    if min_frequency == 0 {
        return Err(Error::Vocab("min_frequency must be at least 1".into()));
    }
    if counts.is_empty() {
        return Err(Error::Vocab("cannot build a vocabulary from an empty multiset".into()));
    }
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for (code, n) in counts {
        let code = code.as_ref();
        if CODE_SPECIALS.contains(&code) {
            return Err(Error::Vocab(format!("code {code:?} collides with a special token")));
        }
        *totals.entry(code).or_default() += n;
    }
    let mut kept: Vec<(&str, usize)> = totals.into_iter().filter(|&(_, n)| n >= min_frequency).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = CODE_SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(c, _)| c.to_string()))
        .collect();
    CodeVocab::from_tokens(tokens, Some(min_frequency))
}
