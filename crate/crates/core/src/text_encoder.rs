//! Long-document text encoder: learned positions that can be lengthened by
//! tiling, and sliding-window attention with global tokens.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::code_encoder::{apply_mlm_masking, MaskingPolicy, MlmTargets};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Dropout, ParamStore, TransformerConfig};
use crate::rng::{indexed_stream, streams, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{AttentionPattern, Graph, Tensor, Var};
use crate::tokenize::TextVocab;

pub const PREFIX: &str = "text";
pub const TOKEN_EMBEDDING: &str = "text.tok_emb";
pub const POSITION_EMBEDDING: &str = "text.pos_emb";
const STACK: &str = "text.enc";
const MLM_HEAD: &str = "text.mlm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub transformer: TransformerConfig,
    /// Rows of the initially trained position table.
    pub base_len: usize,
    /// Current maximum input length; the position table has this many rows.
    pub max_len: usize,
    /// Tokens `i` and `j` may attend when `|i - j| <= window`.
    pub window: usize,
    /// Positions that attend to and are attended by every token. Position 0
    /// is always global.
    #[serde(default)]
    pub global_tokens: Vec<usize>,
    /// Extra uniformly sampled keys per query; 0 disables them.
    #[serde(default)]
    pub random_keys: usize,
    #[serde(default)]
    pub random_seed: u64,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.window == 0 {
            return Err(Error::Config("attention window must be at least 1".into()));
        }
        if self.base_len < 2 || self.max_len < self.base_len {
            return Err(Error::Config(format!(
                "need 2 <= base_len <= max_len, got {} and {}",
                self.base_len, self.max_len
            )));
        }
        if self.vocab_size <= TextVocab::NUM_SPECIAL as usize {
            return Err(Error::Config("text vocabulary has no tokens".into()));
        }
        Ok(())
    }
}

/// Position table of `target_len` rows; row `i` is base row `i mod P`.
pub fn extend_positions<T: Scalar>(base: &Tensor<T>, target_len: usize) -> Result<Tensor<T>> {
    if base.rank() != 2 {
        return Err(Error::shape("extend_positions", format!("table must be rank 2, got {:?}", base.shape())));
    }
    let (p, d) = (base.shape()[0], base.shape()[1]);
    if target_len < p {
        return Err(Error::Invalid(format!("cannot shrink position table from {p} to {target_len} rows")));
    }
    let mut data = Vec::with_capacity(target_len * d);
    for i in 0..target_len {
        data.extend_from_slice(base.row(i % p));
    }
    Tensor::from_vec(vec![target_len, d], data)
}

/// Sliding-window plus global attention pattern. `globals[b]` lists the
/// global positions of example `b`; padding keys are never visible.
pub fn window_pattern(valid: &[Vec<bool>], window: usize, globals: &[Vec<usize>]) -> Result<AttentionPattern> {
    if window == 0 {
        return Err(Error::Invalid("attention window must be at least 1".into()));
    }
    if globals.len() != valid.len() {
        return Err(Error::Invalid("one global set per batch element".into()));
    }
    let len = valid.first().map_or(0, Vec::len);
    let is_global: Vec<Vec<bool>> = globals
        .iter()
        .map(|gs| {
            let mut v = vec![false; len];
            v[0] = true;
            gs.iter().filter(|&&g| g < len).for_each(|&g| v[g] = true);
            v
        })
        .collect();
    Ok(AttentionPattern::from_fn(valid.len(), len, |b, i, j| {
        valid[b][j] && (i.abs_diff(j) <= window || is_global[b][i] || is_global[b][j])
    }))
}

fn add_random_keys(pattern: AttentionPattern, valid: &[Vec<bool>], r: usize, seed: u64) -> AttentionPattern {
    let (batch, len) = (pattern.batch(), pattern.len());
    let mut rows = Vec::with_capacity(batch * len);
    for b in 0..batch {
        let keys: Vec<u32> = (0..len).filter(|&j| valid[b][j]).map(|j| j as u32).collect();
        for i in 0..len {
            let mut row = pattern.keys(b, i).to_vec();
            let mut rng = indexed_stream(seed, streams::SAMPLING, (b * len + i) as u64);
            row.extend(sample(&mut rng, keys.len(), r.min(keys.len())).into_iter().map(|k| keys[k]));
            rows.push(row);
        }
    }
    AttentionPattern::from_rows(batch, len, rows)
}

/// Windowed + global attention on `[B, H, L, dh]` inputs with scale
/// `1/sqrt(dh)`.
pub fn windowed_global_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: usize,
    global_set: &[usize],
    valid: &[Vec<bool>],
) -> Result<Tensor<T>> {
    let dh = *q.shape().last().unwrap_or(&1);
    let globals = vec![global_set.to_vec(); valid.len()];
    let pattern = Arc::new(window_pattern(valid, window, &globals)?);
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let o = g.attention(q, k, v, pattern, 1.0 / (dh as f64).sqrt())?;
    Ok(g.value(o).clone())
}

/// Padded token batch; each row starts with `[CLS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub valid: Vec<Vec<bool>>,
    /// Extra global positions per example, on top of the configured ones.
    pub globals: Vec<Vec<usize>>,
}

impl TextBatch {
    pub fn new(seqs: &[Vec<u32>], cfg: &TextEncoderConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Invalid("empty text batch".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Invalid("empty text sequence".into()));
        }
        if len > cfg.max_len {
            return Err(Error::Invalid(format!(
                "text of {len} tokens exceeds max_len {}; truncate when tokenizing",
                cfg.max_len
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len());
        for s in seqs {
            if let Some(&bad) = s.iter().find(|&&i| i as usize >= cfg.vocab_size) {
                return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
            ids.extend(s.iter().map(|&i| i as usize));
            ids.extend(std::iter::repeat_n(TextVocab::PAD as usize, len - s.len()));
            let mut v = vec![true; s.len()];
            v.resize(len, false);
            valid.push(v);
        }
        Ok(TextBatch {
            batch: seqs.len(),
            len,
            ids,
            valid,
            globals: vec![cfg.global_tokens.clone(); seqs.len()],
        })
    }

    pub fn with_globals(mut self, extra: &[Vec<usize>]) -> Self {
        for (g, e) in self.globals.iter_mut().zip(extra) {
            g.extend(e);
        }
        self
    }

    pub fn pattern(&self, cfg: &TextEncoderConfig) -> Result<AttentionPattern> {
        let p = window_pattern(&self.valid, cfg.window, &self.globals)?;
        Ok(if cfg.random_keys > 0 {
            add_random_keys(p, &self.valid, cfg.random_keys, cfg.random_seed)
        } else {
            p
        })
    }
}

pub fn init_params<T: Scalar>(cfg: &TextEncoderConfig, store: &mut ParamStore<T>, rng: &mut StreamRng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.transformer.d_model;
    store.init_normal(TOKEN_EMBEDDING, &[cfg.vocab_size, d], rng)?;
    let base = Tensor::randn(&[cfg.base_len, d], nn::INIT_STD, rng);
    store.insert(POSITION_EMBEDDING, extend_positions(&base, cfg.max_len)?)?;
    nn::init_transformer(store, STACK, &cfg.transformer, rng)?;
    nn::init_mlm_head(store, MLM_HEAD, d, cfg.vocab_size, rng)
}

/// Returns `(hidden [B, L, d], cls [B, d])`.
pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &TextEncoderConfig, batch: &TextBatch, drop: &mut Dropout) -> Result<(Var, Var)> {
    let (b, l) = (batch.batch, batch.len);
    let tok = g.embedding(p.var(TOKEN_EMBEDDING)?, &batch.ids, &[b, l])?;
    let pos = g.slice(p.var(POSITION_EMBEDDING)?, 0, 0, l)?;
    let x = g.add(tok, pos)?;
    let x = drop.apply(g, x)?;
    let pattern = Arc::new(batch.pattern(cfg)?);
    let hidden = nn::transformer(g, p, STACK, x, &pattern, &cfg.transformer, drop)?;
    let cls = nn::first_token(g, hidden)?;
    Ok((hidden, cls))
}

/// Inference-only forward: `(hidden [B, L, d], cls [B, d])`.
pub fn encode_text<T: Scalar>(params: &ParamStore<T>, cfg: &TextEncoderConfig, seqs: &[Vec<u32>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let batch = TextBatch::new(seqs, cfg)?;
    let mut g = Graph::new();
    let p = params.bind_where(&mut g, |_| false);
    let (h, c) = forward(&mut g, &p, cfg, &batch, &mut Dropout::off())?;
    Ok((g.value(h).clone(), g.value(c).clone()))
}

/// Masks each token sequence; `[CLS]` and other specials are never chosen.
pub fn mask_texts<R: Rng + ?Sized>(seqs: &[Vec<u32>], policy: &MaskingPolicy, vocab: &TextVocab, rng: &mut R) -> (Vec<Vec<u32>>, Vec<Vec<i64>>) {
    seqs.iter()
        .map(|s| {
            let m = apply_mlm_masking(s, policy, vocab, rng);
            (m.ids, m.labels)
        })
        .unzip()
}

pub fn mlm_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, hidden: Var, targets: &MlmTargets) -> Result<Var> {
    nn::mlm_logits(g, p, MLM_HEAD, TOKEN_EMBEDDING, hidden, &targets.positions)
}

/// Logits of the token ids in `columns` at flat `positions`.
pub fn token_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, hidden: Var, positions: &[usize], columns: &[usize]) -> Result<Var> {
    nn::mlm_logits_for(g, p, MLM_HEAD, TOKEN_EMBEDDING, hidden, positions, columns)
}

/// Masked-token cross-entropy over hidden states already computed.
pub fn text_mlm_loss<T: Scalar>(g: &mut Graph<T>, p: &Bound, hidden: Var, targets: &MlmTargets) -> Result<Var> {
    if targets.targets.is_empty() {
        return Err(Error::Train("no masked positions in the text batch".into()));
    }
    let logits = mlm_logits(g, p, hidden, targets)?;
    nn::mlm_loss(g, logits, &targets.targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modular_tiling() {
        let base = Tensor::from_vec(vec![4, 1], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let t = extend_positions(&base, 7).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0]);
        assert_eq!(extend_positions(&base, 4).unwrap(), base);
        assert!(extend_positions(&base, 3).is_err());
    }

    #[test]
    fn pattern_rules() {
        let valid = vec![vec![true, true, true, true, true, false]];
        let p = window_pattern(&valid, 1, &[vec![]]).unwrap();
        assert_eq!(p.keys(0, 0), &[0, 1, 2, 3, 4]);
        assert_eq!(p.keys(0, 3), &[0, 2, 3, 4]);
        assert_eq!(p.keys(0, 5), &[0, 4]);
        assert!(window_pattern(&valid, 0, &[vec![]]).is_err());
        let q = window_pattern(&valid, 1, &[vec![4]]).unwrap();
        assert_eq!(q.keys(0, 1), &[0, 1, 2, 4]);
    }
}
