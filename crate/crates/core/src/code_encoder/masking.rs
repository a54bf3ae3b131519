use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{CodeVocab, TextVocab};

/// Vocabulary facts the masking procedure needs.
pub trait MaskVocab {
    fn mask_id(&self) -> u32;
    fn maskable(&self, id: u32) -> bool;
    /// Ids eligible as random replacements.
    fn replacement_ids(&self) -> Range<u32>;
}

impl MaskVocab for CodeVocab {
    fn mask_id(&self) -> u32 {
        CodeVocab::MASK
    }
    fn maskable(&self, id: u32) -> bool {
        !self.is_special(id)
    }
    fn replacement_ids(&self) -> Range<u32> {
        CodeVocab::NUM_SPECIAL..self.len() as u32
    }
}

impl MaskVocab for TextVocab {
    fn mask_id(&self) -> u32 {
        TextVocab::MASK
    }
    fn maskable(&self, id: u32) -> bool {
        !self.is_special(id)
    }
    fn replacement_ids(&self) -> Range<u32> {
        TextVocab::NUM_SPECIAL..self.len() as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingPolicy {
    pub mask_ratio: f64,
    pub mask_token_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub ignore_index: i64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_ratio: 0.2,
            mask_token_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            ignore_index: -100,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio)));
        }
        let fr = [self.mask_token_frac, self.random_frac, self.keep_frac];
        if fr.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("corruption fractions {fr:?} must be in [0, 1] and sum to 1")));
        }
        if self.ignore_index >= 0 {
            return Err(Error::Config("ignore_index must be negative".into()));
        }
        Ok(())
    }

    /// Number of positions selected out of `n_maskable`.
    pub fn mask_count(&self, n_maskable: usize) -> usize {
        (self.mask_ratio * n_maskable as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub ids: Vec<u32>,
    /// Original id at selected positions, `ignore_index` elsewhere.
    pub labels: Vec<i64>,
    pub corruption: Vec<Option<Corruption>>,
}

impl Masked {
    pub fn selected(&self) -> usize {
        self.corruption.iter().filter(|c| c.is_some()).count()
    }
}

/// Selects exactly `round(mask_ratio * n_maskable)` maskable positions
/// uniformly without replacement and corrupts each one independently
/// according to the mask/random/keep split.
pub fn apply_mlm_masking<V: MaskVocab + ?Sized, R: Rng + ?Sized>(tokens: &[u32], policy: &MaskingPolicy, vocab: &V, rng: &mut R) -> Masked {
    let maskable: Vec<usize> = (0..tokens.len()).filter(|&i| vocab.maskable(tokens[i])).collect();
    let k = policy.mask_count(maskable.len());
    let mut chosen: Vec<usize> = sample(rng, maskable.len(), k).into_iter().map(|i| maskable[i]).collect();
    chosen.sort_unstable();
    let mut out = Masked {
        ids: tokens.to_vec(),
        labels: vec![policy.ignore_index; tokens.len()],
        corruption: vec![None; tokens.len()],
    };
    let repl = vocab.replacement_ids();
    for i in chosen {
        out.labels[i] = tokens[i] as i64;
        let u: f64 = rng.random();
        let kind = if u < policy.mask_token_frac {
            Corruption::Mask
        } else if u < policy.mask_token_frac + policy.random_frac && !repl.is_empty() {
            Corruption::Random
        } else {
            Corruption::Keep
        };
        out.ids[i] = match kind {
            Corruption::Mask => vocab.mask_id(),
            Corruption::Random => rng.random_range(repl.clone()),
            Corruption::Keep => tokens[i],
        };
        out.corruption[i] = Some(kind);
    }
    out
}
