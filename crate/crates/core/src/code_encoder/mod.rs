//! Transformer over diagnostic-code sequences.
//!
//! Every code token carries the signed day offset of its encounter relative
//! to the chosen current encounter (0 for the current encounter itself) and
//! a token type (1 for the current encounter, 0 otherwise). The input
//! embedding is `token + type + c·sinusoid(offset)`; a `[CLS]` token with
//! offset 0 and type 0 is prepended to every sequence and its final hidden
//! state is the sequence summary.

mod masking;

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Patient;
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Dropout, ParamStore, TransformerConfig};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{AttentionPattern, Graph, Tensor, Var};
use crate::tokenize::CodeVocab;

pub use masking::{apply_mlm_masking, Corruption, MaskVocab, Masked, MaskingPolicy};

pub const PREFIX: &str = "code";
pub const TOKEN_EMBEDDING: &str = "code.tok_emb";
const TYPE_EMBEDDING: &str = "code.type_emb";
const STACK: &str = "code.enc";
const MLM_HEAD: &str = "code.mlm";

/// Codes of one patient viewed from one current encounter. Excludes `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncounterSequence {
    pub patient_id: String,
    pub current_encounter: usize,
    pub ids: Vec<u32>,
    pub offsets: Vec<i64>,
    pub token_types: Vec<u8>,
}

impl EncounterSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// A single encounter's codes as the current encounter.
    pub fn single_encounter<S: AsRef<str>>(patient_id: &str, codes: &[S], vocab: &CodeVocab) -> Self {
        EncounterSequence {
            patient_id: patient_id.to_string(),
            current_encounter: 0,
            ids: codes.iter().map(|c| vocab.lookup(c.as_ref())).collect(),
            offsets: vec![0; codes.len()],
            token_types: vec![1; codes.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.offsets.len() || self.ids.len() != self.token_types.len() {
            return Err(Error::Invalid("sequence lists differ in length".into()));
        }
        for i in 0..self.len() {
            if self.token_types[i] == 1 && self.offsets[i] != 0 {
                return Err(Error::Invalid(format!("current-encounter token {i} has nonzero offset")));
            }
        }
        Ok(())
    }
}

/// Sequence of all of `patient`'s codes with encounter `current` as anchor,
/// truncated to `max_codes` tokens by a window centered on the current
/// encounter.
pub fn sequence_for(patient: &Patient, current: usize, vocab: &CodeVocab, max_codes: usize) -> EncounterSequence {
    let anchor = patient.encounters[current].day;
    let mut ids = Vec::new();
    let mut offsets = Vec::new();
    let mut types = Vec::new();
    let (mut start, mut end) = (0, 0);
    for (j, e) in patient.encounters.iter().enumerate() {
        if j == current {
            start = ids.len();
        }
        for c in &e.codes {
            ids.push(vocab.lookup(c));
            offsets.push(e.day - anchor);
            types.push(u8::from(j == current));
        }
        if j == current {
            end = ids.len();
        }
    }
    if ids.len() > max_codes {
        let mid = (start + end) / 2;
        let lo = mid.saturating_sub(max_codes / 2).min(ids.len() - max_codes);
        let hi = lo + max_codes;
        ids = ids[lo..hi].to_vec();
        offsets = offsets[lo..hi].to_vec();
        types = types[lo..hi].to_vec();
    }
    EncounterSequence {
        patient_id: patient.patient_id.clone(),
        current_encounter: current,
        ids,
        offsets,
        token_types: types,
    }
}

/// `k` variants of one patient's sequence, each anchored on a different
/// current encounter sampled without replacement (`k` is capped at the
/// number of encounters).
pub fn build_sequence_variants<R: Rng + ?Sized>(patient: &Patient, k: usize, vocab: &CodeVocab, max_codes: usize, rng: &mut R) -> Vec<EncounterSequence> {
    let n = patient.encounters.len();
    sample(rng, n, k.min(n))
        .into_iter()
        .map(|cur| sequence_for(patient, cur, vocab, max_codes))
        .collect()
}

/// `PE[2i] = sin(offset / 10000^(2i/d))`, `PE[2i+1] = cos(...)`.
pub fn sinusoidal_embedding(offset: i64, d: usize) -> Vec<f64> {
    assert!(d.is_multiple_of(2), "sinusoidal dimension must be even");
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let angle = offset as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeEncoderConfig {
    pub vocab_size: usize,
    pub transformer: TransformerConfig,
    /// Maximum length including `[CLS]`.
    pub max_len: usize,
    /// Multiplier on the sinusoidal offset embedding so that it starts at
    /// the scale of the learned embeddings.
    #[serde(default = "default_offset_scale")]
    pub offset_scale: f64,
}

fn default_offset_scale() -> f64 {
    nn::INIT_STD
}

impl CodeEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if !self.transformer.d_model.is_multiple_of(2) {
            return Err(Error::Config("code encoder d_model must be even".into()));
        }
        if !(self.offset_scale >= 0.0 && self.offset_scale.is_finite()) {
            return Err(Error::Config("offset_scale must be finite and nonnegative".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("code encoder max_len must be at least 2".into()));
        }
        if self.vocab_size <= CodeVocab::NUM_SPECIAL as usize {
            return Err(Error::Config("code vocabulary has no codes".into()));
        }
        Ok(())
    }

    pub fn max_codes(&self) -> usize {
        self.max_len - 1
    }
}

/// Padded batch with `[CLS]` at position 0 of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub offsets: Vec<i64>,
    pub token_types: Vec<usize>,
    pub valid: Vec<Vec<bool>>,
}

impl CodeBatch {
    pub fn new(seqs: &[EncounterSequence], cfg: &CodeEncoderConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Invalid("empty code batch".into()));
        }
        let len = 1 + seqs.iter().map(EncounterSequence::len).max().unwrap_or(0);
        if len > cfg.max_len {
            return Err(Error::Invalid(format!("code sequence of length {len} exceeds max_len {}", cfg.max_len)));
        }
        let mut b = CodeBatch {
            batch: seqs.len(),
            len,
            ids: Vec::with_capacity(seqs.len() * len),
            offsets: Vec::with_capacity(seqs.len() * len),
            token_types: Vec::with_capacity(seqs.len() * len),
            valid: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            s.validate()?;
            if let Some(&bad) = s.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
                return Err(Error::Vocab(format!("code id {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
            b.ids.push(CodeVocab::CLS as usize);
            b.offsets.push(0);
            b.token_types.push(0);
            b.ids.extend(s.ids.iter().map(|&i| i as usize));
            b.offsets.extend(&s.offsets);
            b.token_types.extend(s.token_types.iter().map(|&t| t as usize));
            let pad = len - 1 - s.len();
            b.ids.extend(std::iter::repeat_n(CodeVocab::PAD as usize, pad));
            b.offsets.extend(std::iter::repeat_n(0, pad));
            b.token_types.extend(std::iter::repeat_n(0, pad));
            let mut v = vec![true; 1 + s.len()];
            v.resize(len, false);
            b.valid.push(v);
        }
        Ok(b)
    }
}

/// Flat prediction positions (`b * L + i`) and their target ids, built
/// from per-sequence labels that exclude `[CLS]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MlmTargets {
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MlmTargets {
    pub fn from_labels(labels: &[Vec<i64>], len: usize, shift: usize) -> Self {
        let mut t = MlmTargets::default();
        for (b, row) in labels.iter().enumerate() {
            for (i, &l) in row.iter().enumerate() {
                if l >= 0 {
                    t.positions.push(b * len + i + shift);
                    t.targets.push(l as usize);
                }
            }
        }
        t
    }
}

/// Masks every sequence independently; returns the corrupted sequences and
/// the batch-level prediction targets.
pub fn mask_sequences<R: Rng + ?Sized>(
    seqs: &[EncounterSequence],
    policy: &MaskingPolicy,
    vocab: &CodeVocab,
    rng: &mut R,
) -> (Vec<EncounterSequence>, Vec<Vec<i64>>) {
    let mut out = Vec::with_capacity(seqs.len());
    let mut labels = Vec::with_capacity(seqs.len());
    for s in seqs {
        let m = apply_mlm_masking(&s.ids, policy, vocab, rng);
        out.push(EncounterSequence { ids: m.ids, ..s.clone() });
        labels.push(m.labels);
    }
    (out, labels)
}

pub fn init_params<T: Scalar>(cfg: &CodeEncoderConfig, store: &mut ParamStore<T>, rng: &mut StreamRng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.transformer.d_model;
    store.init_normal(TOKEN_EMBEDDING, &[cfg.vocab_size, d], rng)?;
    store.init_normal(TYPE_EMBEDDING, &[2, d], rng)?;
    nn::init_transformer(store, STACK, &cfg.transformer, rng)?;
    nn::init_mlm_head(store, MLM_HEAD, d, cfg.vocab_size, rng)
}

/// Returns `(hidden [B, L, d], cls [B, d])`.
pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &CodeEncoderConfig, batch: &CodeBatch, drop: &mut Dropout) -> Result<(Var, Var)> {
    let (b, l, d) = (batch.batch, batch.len, cfg.transformer.d_model);
    let tok = g.embedding(p.var(TOKEN_EMBEDDING)?, &batch.ids, &[b, l])?;
    let typ = g.embedding(p.var(TYPE_EMBEDDING)?, &batch.token_types, &[b, l])?;
    let mut pe = Vec::with_capacity(b * l * d);
    for &o in &batch.offsets {
        pe.extend(sinusoidal_embedding(o, d).into_iter().map(|x| T::lit(x * cfg.offset_scale)));
    }
    let pe = g.constant(Tensor::from_vec(vec![b, l, d], pe)?);
    let x = g.add(tok, typ)?;
    let x = g.add(x, pe)?;
    let x = drop.apply(g, x)?;
    let pattern = Arc::new(AttentionPattern::dense(&batch.valid));
    let hidden = nn::transformer(g, p, STACK, x, &pattern, &cfg.transformer, drop)?;
    let cls = nn::first_token(g, hidden)?;
    Ok((hidden, cls))
}

/// Inference-only forward: `(hidden [B, L, d], cls [B, d])`.
pub fn encode_codes<T: Scalar>(params: &ParamStore<T>, cfg: &CodeEncoderConfig, seqs: &[EncounterSequence]) -> Result<(Tensor<T>, Tensor<T>)> {
    let batch = CodeBatch::new(seqs, cfg)?;
    let mut g = Graph::new();
    let p = params.bind_where(&mut g, |_| false);
    let (h, c) = forward(&mut g, &p, cfg, &batch, &mut Dropout::off())?;
    Ok((g.value(h).clone(), g.value(c).clone()))
}

/// MLM logits `[M, V]` at the target positions.
pub fn mlm_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, hidden: Var, targets: &MlmTargets) -> Result<Var> {
    nn::mlm_logits(g, p, MLM_HEAD, TOKEN_EMBEDDING, hidden, &targets.positions)
}

/// Mean masked-token cross-entropy for a corrupted batch.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &CodeEncoderConfig, batch: &CodeBatch, targets: &MlmTargets, drop: &mut Dropout) -> Result<Var> {
    if targets.targets.is_empty() {
        return Err(Error::Train("no masked positions in the code batch".into()));
    }
    let (hidden, _) = forward(g, p, cfg, batch, drop)?;
    let logits = mlm_logits(g, p, hidden, targets)?;
    nn::mlm_loss(g, logits, &targets.targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero_and_one() {
        assert_eq!(sinusoidal_embedding(0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embedding(1, 4);
        let expected = [0.841471, 0.540302, 0.010000, 0.999950];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 5e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn sinusoid_parity() {
        let (p, n) = (sinusoidal_embedding(37, 8), sinusoidal_embedding(-37, 8));
        for i in 0..4 {
            assert_eq!(p[2 * i], -n[2 * i]);
            assert_eq!(p[2 * i + 1], n[2 * i + 1]);
        }
    }

    #[test]
    fn targets_shift_past_cls() {
        let t = MlmTargets::from_labels(&[vec![-100, 7], vec![5, -100, -100]], 4, 1);
        assert_eq!(t.positions, vec![2, 5]);
        assert_eq!(t.targets, vec![7, 5]);
    }
}
