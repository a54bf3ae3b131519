//! Character-level byte-pair encoding.
//!
//! Text is split into chunks that begin at every whitespace character, so a
//! chunk is either a leading word or a whitespace character followed by the
//! non-whitespace run after it. Merges never cross chunk boundaries, which
//! makes `decode(encode(x)) == x` for any text over the trained alphabet.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

use super::{escape_token, parse_vocab, render_vocab, sha256_hex, unescape_token};

pub(crate) const TEXT_SPECIALS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[POS]", "[NEG]"];

/// Learned merge rules plus the token table.
///
/// Special ids: `PAD = 0`, `UNK = 1`, `CLS = 2`, `SEP = 3`, `MASK = 4`, and
/// the two verbalizer tokens `POS = 5`, `NEG = 6`. The verbalizer tokens are
/// never produced by [`TextVocab::encode`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    /// (left id, right id) → (rank, merged id).
    merge_table: HashMap<(u32, u32), (u32, u32)>,
}

fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if i > start && c.is_whitespace() {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Merges every non-overlapping occurrence of `(l, r)`, left to right.
fn merge_pair(symbols: &mut Vec<u32>, l: u32, r: u32, merged: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

impl TextVocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const SEP: u32 = 3;
    pub const MASK: u32 = 4;
    pub const POS: u32 = 5;
    pub const NEG: u32 = 6;
    pub const NUM_SPECIAL: u32 = 7;

    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        for (i, s) in TEXT_SPECIALS.iter().enumerate() {
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
        let mut merge_table = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let id = |s: &str| {
                index
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Vocab(format!("merge refers to unknown token {s:?}")))
            };
            let key = (id(l)?, id(r)?);
            let merged = id(&format!("{l}{r}"))?;
            merge_table.entry(key).or_insert((rank as u32, merged));
        }
        Ok(TextVocab {
            tokens,
            index,
            merges,
            merge_table,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < Self::NUM_SPECIAL
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.index.get(&*c.encode_utf8(&mut buf)).copied().unwrap_or(Self::UNK)
            })
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_table.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min();
            match best {
                Some((_, l, r, id)) => merge_pair(&mut symbols, l, r, id),
                None => break,
            }
        }
        out.extend(symbols);
    }

    /// Token ids for `text`, without any special tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for chunk in chunks(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// `[CLS]` followed by the tokens of `text`, truncated to `max_len` ids.
    pub fn encode_text(&self, text: &str, max_len: usize) -> Vec<u32> {
        assert!(max_len >= 2, "max_len must leave room for CLS and one token");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(Self::CLS);
        ids.extend(self.encode(text));
        ids.truncate(max_len);
        ids
    }

    /// Concatenates the strings of all non-special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().filter(|&&id| !self.is_special(id)).filter_map(|&id| self.token(id)).collect()
    }

    pub fn vocab_file_string(&self) -> String {
        render_vocab(&self.tokens)
    }

    pub fn merges_file_string(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            s.push_str(&escape_token(l));
            s.push(' ');
            s.push_str(&escape_token(r));
            s.push('\n');
        }
        s
    }

    pub fn fingerprint(&self) -> String {
        let mut all = self.vocab_file_string();
        all.push_str(&self.merges_file_string());
        sha256_hex(all.as_bytes())
    }

    pub fn save(&self, vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(vocab_path, self.vocab_file_string())?;
        std::fs::write(merges_path, self.merges_file_string())?;
        Ok(())
    }

    pub fn load(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let (vp, mp) = (vocab_path.as_ref(), merges_path.as_ref());
        let tokens = parse_vocab(&std::fs::read_to_string(vp)?, &vp.display().to_string())?;
        let mut merges = Vec::new();
        for (n, line) in std::fs::read_to_string(mp)?.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: mp.display().to_string(),
                line: n + 1,
                msg,
            };
            let (l, r) = line.split_once(' ').ok_or_else(|| err("expected \"left right\"".into()))?;
            merges.push((
                unescape_token(l).map_err(|e| err(e.to_string()))?,
                unescape_token(r).map_err(|e| err(e.to_string()))?,
            ));
        }
        Self::from_parts(tokens, merges)
    }
}

/// Learns a vocabulary of exactly `vocab_size` entries from `corpus`.
///
/// Each iteration merges the most frequent adjacent pair; ties go to the
/// lexicographically smallest `(left, right)` string pair. Training is fully
/// deterministic.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<TextVocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any_text = false;
    for text in corpus {
        for chunk in chunks(text.as_ref()) {
            any_text = true;
            *word_counts.entry(chunk.to_string()).or_default() += 1;
        }
    }
    if !any_text {
        return Err(Error::Vocab("cannot train BPE on an empty corpus".into()));
    }
    let mut alphabet: Vec<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();

    let mut tokens: Vec<String> = TEXT_SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    if vocab_size < tokens.len() {
        return Err(Error::Vocab(format!(
            "vocab_size {vocab_size} is smaller than specials plus alphabet ({})",
            tokens.len()
        )));
    }
    let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let mut words: Vec<(Vec<u32>, usize)> = word_counts
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| index[&c.to_string()]).collect(), n))
        .collect();
    let mut merges = Vec::new();

    while tokens.len() < vocab_size {
        let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pair_counts.into_iter().max_by(|a, b| {
            a.1.cmp(&b.1).then_with(|| {
                let ka = (&tokens[a.0 .0 as usize], &tokens[a.0 .1 as usize]);
                let kb = (&tokens[b.0 .0 as usize], &tokens[b.0 .1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((l, r), _)) = best else {
            return Err(Error::Vocab(format!(
                "corpus supports only {} entries, vocab_size {vocab_size} requested",
                tokens.len()
            )));
        };
        let merged_str = format!("{}{}", tokens[l as usize], tokens[r as usize]);
        let merged = match index.get(&merged_str) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                tokens.push(merged_str.clone());
                index.insert(merged_str, id);
                id
            }
        };
        merges.push((tokens[l as usize].clone(), tokens[r as usize].clone()));
        for (syms, _) in words.iter_mut() {
            merge_pair(syms, l, r, merged);
        }
    }
    TextVocab::from_parts(tokens, merges)
}
