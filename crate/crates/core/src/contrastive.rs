//! Joint training of the text and code encoders in a shared embedding space.
//!
//! Both `[CLS]` states pass through a linear projection and L2
//! normalization. Matched note/code pairs in a batch are positives and all
//! cross pairs negatives; the symmetric InfoNCE loss is combined with the
//! text MLM loss through learned uncertainty weights
//! `total = Σ exp(-s_i)·L_i + s_i`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::code_encoder::{self, CodeBatch, CodeEncoderConfig, EncounterSequence, MaskingPolicy, MlmTargets};
use crate::data::NoteRecord;
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Dropout, ParamStore, TransformerConfig};
use crate::optim::TrainConfig;
use crate::rng::{indexed_stream, streams, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::text_encoder::{self, extend_positions, TextBatch, TextEncoderConfig};
use crate::tokenize::{CodeVocab, TextVocab};
use crate::train::{self, eval_chunks};

pub const TEXT_HEAD: &str = "head.text";
pub const CODE_HEAD: &str = "head.code";
pub const LOG_TAU: &str = "head.log_tau";
pub const S_MLM: &str = "head.s_mlm";
pub const S_CONTRASTIVE: &str = "head.s_contrastive";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Shared embedding width; `None` uses the text encoder width.
    pub proj_dim: Option<usize>,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            proj_dim: None,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 1.0,
        }
    }
}

/// Configuration of both encoders plus the joint heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    pub text: TextEncoderConfig,
    pub code: CodeEncoderConfig,
    #[serde(default)]
    pub heads: HeadConfig,
}

impl DualConfig {
    /// Desk-scale architecture: width 64, two layers of four heads, text
    /// length 256 with a local window of 16, code length 64.
    pub fn desk(text_vocab_size: usize, code_vocab_size: usize) -> Self {
        let transformer = TransformerConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            dropout: 0.1,
        };
        DualConfig {
            text: TextEncoderConfig {
                vocab_size: text_vocab_size,
                transformer: transformer.clone(),
                base_len: 256,
                max_len: 256,
                window: 16,
                global_tokens: vec![0],
                random_keys: 0,
                random_seed: 0,
            },
            code: CodeEncoderConfig {
                vocab_size: code_vocab_size,
                transformer,
                max_len: 64,
                offset_scale: nn::INIT_STD,
            },
            heads: HeadConfig::default(),
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.heads.proj_dim.unwrap_or(self.text.transformer.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.code.validate()?;
        let h = &self.heads;
        if self.proj_dim() == 0 {
            return Err(Error::Config("projection width must be positive".into()));
        }
        if !(0.0 < h.tau_min && h.tau_min <= h.tau_init && h.tau_init <= h.tau_max) {
            return Err(Error::Config(format!(
                "need 0 < tau_min <= tau_init <= tau_max, got {} {} {}",
                h.tau_min, h.tau_init, h.tau_max
            )));
        }
        Ok(())
    }
}

/// Projection heads, log-temperature and the two loss weights.
pub fn init_heads<T: Scalar>(cfg: &DualConfig, store: &mut ParamStore<T>, rng: &mut StreamRng) -> Result<()> {
    cfg.validate()?;
    let p = cfg.proj_dim();
    nn::init_linear(store, TEXT_HEAD, cfg.text.transformer.d_model, p, rng)?;
    nn::init_linear(store, CODE_HEAD, cfg.code.transformer.d_model, p, rng)?;
    store.insert(LOG_TAU, Tensor::scalar(T::lit(cfg.heads.tau_init.ln())))?;
    store.insert(S_MLM, Tensor::scalar(T::zero()))?;
    store.insert(S_CONTRASTIVE, Tensor::scalar(T::zero()))
}

/// Fresh parameters for both encoders and the heads, each drawn from its own
/// sub-stream of the init stream.
pub fn init_dual<T: Scalar>(cfg: &DualConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    text_encoder::init_params(&cfg.text, &mut store, &mut indexed_stream(seed, streams::INIT, 0))?;
    code_encoder::init_params(&cfg.code, &mut store, &mut indexed_stream(seed, streams::INIT, 1))?;
    init_heads(cfg, &mut store, &mut indexed_stream(seed, streams::INIT, 2))?;
    Ok(store)
}

pub fn temperature<T: Scalar>(store: &ParamStore<T>) -> Result<f64> {
    Ok(store.get(LOG_TAU)?.item()?.as_f64().exp())
}

/// Clamps τ into `[tau_min, tau_max]`.
pub fn clamp_temperature<T: Scalar>(store: &mut ParamStore<T>, heads: &HeadConfig) -> Result<()> {
    let t = store.get_mut(LOG_TAU)?;
    let (lo, hi) = (T::lit(heads.tau_min.ln()), T::lit(heads.tau_max.ln()));
    t.data_mut().iter_mut().for_each(|x| *x = x.max(lo).min(hi));
    Ok(())
}

/// Linear projection of `[N, d]` followed by row normalization.
pub fn project<T: Scalar>(g: &mut Graph<T>, p: &Bound, head: &str, cls: Var) -> Result<Var> {
    let y = nn::linear(g, p, head, cls)?;
    g.l2_normalize(y)
}

/// Symmetric InfoNCE over unit rows `t, d: [N, p]` with temperature
/// `exp(log_tau)` (a scalar var).
pub fn info_nce<T: Scalar>(g: &mut Graph<T>, t: Var, d: Var, log_tau: Var) -> Result<Var> {
    let (st, sd) = (g.shape(t).to_vec(), g.shape(d).to_vec());
    if st.len() != 2 || st != sd {
        return Err(Error::shape("info_nce", format!("{st:?} vs {sd:?}")));
    }
    let n = st[0];
    if n < 2 {
        return Err(Error::Invalid("info_nce needs at least 2 pairs for negatives".into()));
    }
    let dt = g.transpose(d)?;
    let sim = g.matmul(t, dt)?;
    let neg = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(neg)?;
    let logits = g.mul(sim, inv_tau)?;
    let targets: Vec<i64> = (0..n as i64).collect();
    let a = g.cross_entropy(logits, &targets, -1)?;
    let lt = g.transpose(logits)?;
    let b = g.cross_entropy(lt, &targets, -1)?;
    let s = g.add(a, b)?;
    g.scale(s, 0.5)
}

/// `Σ exp(-s_i)·L_i + s_i` over `(loss, s)` pairs of scalar vars.
pub fn combine_losses<T: Scalar>(g: &mut Graph<T>, terms: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(l, s) in terms {
        let v = g.value(l).item()?.as_f64();
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Train(format!("loss terms must be finite and nonnegative, got {v}")));
        }
        let ns = g.scale(s, -1.0)?;
        let w = g.exp(ns)?;
        let wl = g.mul(l, w)?;
        let term = g.add(wl, s)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Invalid("combine_losses needs at least one term".into()))
}

/// A note and the single-encounter code sequence it was written for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub id: String,
    pub text: Vec<u32>,
    pub codes: EncounterSequence,
}

/// Tokenized pairs; code lists are truncated to the code encoder's capacity.
pub fn build_pairs(notes: &[NoteRecord], text_vocab: &TextVocab, code_vocab: &CodeVocab, cfg: &DualConfig) -> Vec<Pair> {
    notes
        .iter()
        .map(|n| {
            let codes = &n.codes[..n.codes.len().min(cfg.code.max_codes())];
            Pair {
                id: n.note_id.clone(),
                text: text_vocab.encode_text(&n.text, cfg.text.max_len),
                codes: EncounterSequence::single_encounter(&n.note_id, codes, code_vocab),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveOptions {
    /// Adds text MLM on the same notes, weighted by uncertainty.
    pub text_mlm: bool,
    pub masking: MaskingPolicy,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        ContrastiveOptions {
            text_mlm: true,
            masking: MaskingPolicy::default(),
        }
    }
}

/// One row of the loss-curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_mlm: f64,
    pub tau: f64,
    pub s_mlm: f64,
    pub s_contrastive: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurveRow>,
    /// `(step, dev contrastive loss)`.
    pub dev: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_dev_loss: f64,
}

pub fn write_curve(path: impl AsRef<std::path::Path>, curve: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

struct Embedded {
    t: Var,
    d: Var,
    text_hidden: Var,
}

fn embed_batch(g: &mut Graph<f32>, p: &Bound, cfg: &DualConfig, texts: &[Vec<u32>], codes: &[EncounterSequence], drop: &mut Dropout) -> Result<Embedded> {
    let tb = TextBatch::new(texts, &cfg.text)?;
    let (text_hidden, tcls) = text_encoder::forward(g, p, &cfg.text, &tb, drop)?;
    let cb = CodeBatch::new(codes, &cfg.code)?;
    let (_, ccls) = code_encoder::forward(g, p, &cfg.code, &cb, drop)?;
    let t = project(g, p, TEXT_HEAD, tcls)?;
    let d = project(g, p, CODE_HEAD, ccls)?;
    Ok(Embedded { t, d, text_hidden })
}

fn warn_collisions(codes: &[EncounterSequence]) {
    let mut seen = HashSet::new();
    let dup = codes
        .iter()
        .filter(|c| {
            let mut k = c.ids.clone();
            k.sort_unstable();
            !seen.insert(k)
        })
        .count();
    if dup > 0 {
        log::debug!("{dup} duplicate code sets in batch act as noisy negatives");
    }
}

/// Trains all of `params` on `train`. The text side is masked once per
/// batch and that single forward pass feeds both the MLM loss and the
/// contrastive embedding. Returns with the parameters of the lowest dev
/// contrastive loss (the final ones when `dev` is empty).
pub fn train_contrastive(
    params: &mut ParamStore<f32>,
    cfg: &DualConfig,
    train: &[Pair],
    dev: &[Pair],
    tc: &TrainConfig,
    opts: &ContrastiveOptions,
    vocab: &TextVocab,
) -> Result<TrainReport> {
    cfg.validate()?;
    opts.masking.validate()?;
    if train.len() < 2 || tc.batch_size < 2 {
        return Err(Error::Train("contrastive training needs batches of at least 2 pairs".into()));
    }
    let micro = |p: &ParamStore<f32>, idx: &[usize], counter: u64| -> train::MicroResult {
        let mut texts: Vec<Vec<u32>> = idx.iter().map(|&i| train[i].text.clone()).collect();
        let codes: Vec<EncounterSequence> = idx.iter().map(|&i| train[i].codes.clone()).collect();
        warn_collisions(&codes);
        let mut targets = MlmTargets::default();
        if opts.text_mlm {
            let mut rng = indexed_stream(tc.seed, streams::MASKING, counter);
            let (masked, labels) = text_encoder::mask_texts(&texts, &opts.masking, vocab, &mut rng);
            let len = masked.iter().map(Vec::len).max().unwrap_or(0);
            targets = MlmTargets::from_labels(&labels, len, 0);
            texts = masked;
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let mut drop = Dropout::new(tc.dropout, indexed_stream(tc.seed, streams::DROPOUT, counter));
        let e = embed_batch(&mut g, &b, cfg, &texts, &codes, &mut drop)?;
        let lc = info_nce(&mut g, e.t, e.d, b.var(LOG_TAU)?)?;
        let vc = g.value(lc).item()?.as_f64();
        let (total, vm) = if opts.text_mlm && !targets.targets.is_empty() {
            let lm = text_encoder::text_mlm_loss(&mut g, &b, e.text_hidden, &targets)?;
            let vm = g.value(lm).item()?.as_f64();
            let total = combine_losses(&mut g, &[(lc, b.var(S_CONTRASTIVE)?), (lm, b.var(S_MLM)?)])?;
            (total, vm)
        } else {
            (lc, 0.0)
        };
        let vt = g.value(total).item()?.as_f64();
        g.backward(total)?;
        Ok(Some((b.grads(&g), vec![vt, vc, vm])))
    };
    let eval = |p: &ParamStore<f32>| -> Result<f64> {
        if dev.is_empty() {
            return Ok(0.0);
        }
        contrastive_loss_on(p, cfg, dev, tc.batch_size)
    };
    let mut hist = Vec::with_capacity(tc.steps);
    let constrain = |p: &mut ParamStore<f32>| {
        clamp_temperature(p, &cfg.heads).expect("heads initialized");
        hist.push(head_state(p).expect("heads initialized"));
    };
    let outcome = train::run(params, tc, train.len(), micro, constrain, eval)?;
    let curve = outcome
        .logs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let (tau, s_mlm, s_c) = hist.get(i).copied().unwrap_or((f64::NAN, f64::NAN, f64::NAN));
            let c = |k: usize| l.components.get(k).copied().unwrap_or(f64::NAN);
            CurveRow {
                step: l.step,
                loss_total: c(0),
                loss_contrastive: c(1),
                loss_mlm: c(2),
                tau,
                s_mlm,
                s_contrastive: s_c,
                lr: l.lr,
            }
        })
        .collect();
    Ok(TrainReport {
        curve,
        dev: outcome.dev,
        best_step: outcome.best_step,
        best_dev_loss: outcome.best_dev,
    })
}

fn head_state(p: &ParamStore<f32>) -> Result<(f64, f64, f64)> {
    Ok((temperature(p)?, p.get(S_MLM)?.item()?.as_f64(), p.get(S_CONTRASTIVE)?.item()?.as_f64()))
}

/// Unit embeddings `(T_N, D_N)` of all pairs, computed in chunks of `batch`.
pub fn embed_pairs<T: Scalar>(params: &ParamStore<T>, cfg: &DualConfig, pairs: &[Pair], batch: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let texts: Vec<Vec<u32>> = pairs.iter().map(|p| p.text.clone()).collect();
    let codes: Vec<EncounterSequence> = pairs.iter().map(|p| p.codes.clone()).collect();
    Ok((embed_texts(params, cfg, &texts, batch)?, embed_codes(params, cfg, &codes, batch)?))
}

fn stack<T: Scalar>(rows: Vec<Tensor<T>>, width: usize) -> Result<Tensor<T>> {
    let data: Vec<T> = rows.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_vec(vec![data.len() / width, width], data)
}

/// Projected unit text embeddings `[N, p]`.
pub fn embed_texts<T: Scalar>(params: &ParamStore<T>, cfg: &DualConfig, texts: &[Vec<u32>], batch: usize) -> Result<Tensor<T>> {
    let mut out = Vec::new();
    for chunk in texts.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let p = params.bind_where(&mut g, |_| false);
        let tb = TextBatch::new(chunk, &cfg.text)?;
        let (_, cls) = text_encoder::forward(&mut g, &p, &cfg.text, &tb, &mut Dropout::off())?;
        let t = project(&mut g, &p, TEXT_HEAD, cls)?;
        out.push(g.value(t).clone());
    }
    stack(out, cfg.proj_dim())
}

/// Projected unit code-sequence embeddings `[N, p]`.
pub fn embed_codes<T: Scalar>(params: &ParamStore<T>, cfg: &DualConfig, codes: &[EncounterSequence], batch: usize) -> Result<Tensor<T>> {
    let mut out = Vec::new();
    for chunk in codes.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let p = params.bind_where(&mut g, |_| false);
        let cb = CodeBatch::new(chunk, &cfg.code)?;
        let (_, cls) = code_encoder::forward(&mut g, &p, &cfg.code, &cb, &mut Dropout::off())?;
        let d = project(&mut g, &p, CODE_HEAD, cls)?;
        out.push(g.value(d).clone());
    }
    stack(out, cfg.proj_dim())
}

fn rows<T: Scalar>(m: &Tensor<T>, r: std::ops::Range<usize>) -> Result<Tensor<T>> {
    let w = m.shape()[1];
    Tensor::from_vec(vec![r.len(), w], m.data()[r.start * w..r.end * w].to_vec())
}

/// Mean contrastive loss over fixed chunks of `batch` pairs (no dropout, no
/// masking).
pub fn contrastive_loss_on<T: Scalar>(params: &ParamStore<T>, cfg: &DualConfig, pairs: &[Pair], batch: usize) -> Result<f64> {
    let (t, d) = embed_pairs(params, cfg, pairs, batch)?;
    let log_tau = params.get(LOG_TAU)?.clone();
    let chunks = eval_chunks(pairs.len(), batch);
    if chunks.is_empty() || chunks[0].len() < 2 {
        return Err(Error::Invalid("need at least 2 pairs for a contrastive loss".into()));
    }
    let mut total = 0.0;
    for r in &chunks {
        let mut g = Graph::new();
        let tv = g.constant(rows(&t, r.clone())?);
        let dv = g.constant(rows(&d, r.clone())?);
        let lt = g.constant(log_tau.clone());
        let l = info_nce(&mut g, tv, dv, lt)?;
        total += g.value(l).item()?.as_f64();
    }
    Ok(total / chunks.len() as f64)
}

/// Fraction of notes whose own code sequence is the most similar one within
/// its evaluation chunk of `batch` pairs.
pub fn in_batch_retrieval<T: Scalar>(params: &ParamStore<T>, cfg: &DualConfig, pairs: &[Pair], batch: usize) -> Result<f64> {
    let (t, d) = embed_pairs(params, cfg, pairs, batch)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for r in eval_chunks(pairs.len(), batch) {
        for i in r.clone() {
            let sims: Vec<f64> = r
                .clone()
                .map(|j| t.row(i).iter().zip(d.row(j)).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
                .collect();
            let own = sims[i - r.start];
            hit += usize::from(sims.iter().enumerate().all(|(j, &s)| j == i - r.start || s < own));
            n += 1;
        }
    }
    Ok(hit as f64 / n.max(1) as f64)
}

/// Extends the text position table to `new_max_len` rows by tiling its
/// first `base_len` rows. Everything else is unchanged; optimizer state is
/// not part of the parameters, so the next stage starts afresh.
pub fn stage_lengthen<T: Scalar>(params: &mut ParamStore<T>, cfg: &mut DualConfig, new_max_len: usize) -> Result<()> {
    if new_max_len < cfg.text.max_len {
        return Err(Error::Invalid(format!(
            "cannot shrink text encoder from {} to {new_max_len} positions",
            cfg.text.max_len
        )));
    }
    let table = params.get(text_encoder::POSITION_EMBEDDING)?;
    let d = table.shape()[1];
    let base = Tensor::from_vec(vec![cfg.text.base_len, d], table.data()[..cfg.text.base_len * d].to_vec())?;
    params.set(text_encoder::POSITION_EMBEDDING, extend_positions(&base, new_max_len)?);
    cfg.text.max_len = new_max_len;
    Ok(())
}
