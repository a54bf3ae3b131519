//! Masked-language-model pre-training of each encoder on its own.

use serde::{Deserialize, Serialize};

use crate::code_encoder::{self, CodeBatch, CodeEncoderConfig, EncounterSequence, MaskingPolicy, MlmTargets};
use crate::error::Result;
use crate::nn::{Dropout, ParamStore};
use crate::optim::TrainConfig;
use crate::rng::{indexed_stream, streams};
use crate::tensor::Graph;
use crate::text_encoder::{self, TextBatch, TextEncoderConfig};
use crate::tokenize::{CodeVocab, TextVocab};
use crate::train::{self, eval_chunks};

/// Index of the fixed masking sub-stream used for dev evaluation.
const DEV_MASK_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub curve: Vec<MlmRow>,
    /// `(step, dev MLM loss)`.
    pub dev: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_dev_loss: f64,
}

impl MlmReport {
    fn from_outcome(o: train::Outcome) -> Self {
        MlmReport {
            curve: o
                .logs
                .iter()
                .map(|l| MlmRow {
                    step: l.step,
                    loss: l.components.first().copied().unwrap_or(f64::NAN),
                    lr: l.lr,
                })
                .collect(),
            dev: o.dev,
            best_step: o.best_step,
            best_dev_loss: o.best_dev,
        }
    }

    pub fn best_dev_perplexity(&self) -> f64 {
        self.best_dev_loss.exp()
    }
}

pub fn write_mlm_curve(path: impl AsRef<std::path::Path>, curve: &[MlmRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn code_step(
    p: &ParamStore<f32>,
    cfg: &CodeEncoderConfig,
    seqs: &[EncounterSequence],
    policy: &MaskingPolicy,
    vocab: &CodeVocab,
    mask_stream: (u64, u64),
    drop: &mut Dropout,
    train: bool,
) -> train::MicroResult {
    let mut rng = indexed_stream(mask_stream.0, streams::MASKING, mask_stream.1);
    let (masked, labels) = code_encoder::mask_sequences(seqs, policy, vocab, &mut rng);
    let batch = CodeBatch::new(&masked, cfg)?;
    let targets = MlmTargets::from_labels(&labels, batch.len, 1);
    if targets.targets.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let b = if train { p.bind(&mut g) } else { p.bind_where(&mut g, |_| false) };
    let loss = code_encoder::mlm_loss(&mut g, &b, cfg, &batch, &targets, drop)?;
    let v = g.value(loss).item()? as f64;
    if !train {
        return Ok(Some((Default::default(), vec![v])));
    }
    g.backward(loss)?;
    Ok(Some((b.grads(&g), vec![v])))
}

/// Mean masked-code loss over fixed chunks with a fixed masking stream.
pub fn code_mlm_loss_on(
    params: &ParamStore<f32>,
    cfg: &CodeEncoderConfig,
    seqs: &[EncounterSequence],
    policy: &MaskingPolicy,
    vocab: &CodeVocab,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for (c, r) in eval_chunks(seqs.len(), batch).into_iter().enumerate() {
        let stream = (seed ^ c as u64, DEV_MASK_STREAM);
        if let Some((_, v)) = code_step(params, cfg, &seqs[r], policy, vocab, stream, &mut Dropout::off(), false)? {
            total += v[0];
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// Pre-trains the code encoder on `train` sequences; keeps the parameters
/// with the lowest dev MLM loss.
pub fn pretrain_codes(
    params: &mut ParamStore<f32>,
    cfg: &CodeEncoderConfig,
    train_set: &[EncounterSequence],
    dev: &[EncounterSequence],
    tc: &TrainConfig,
    policy: &MaskingPolicy,
    vocab: &CodeVocab,
) -> Result<MlmReport> {
    cfg.validate()?;
    policy.validate()?;
    let micro = |p: &ParamStore<f32>, idx: &[usize], counter: u64| {
        let seqs: Vec<EncounterSequence> = idx.iter().map(|&i| train_set[i].clone()).collect();
        let mut drop = Dropout::new(tc.dropout, indexed_stream(tc.seed, streams::DROPOUT, counter));
        code_step(p, cfg, &seqs, policy, vocab, (tc.seed, counter), &mut drop, true)
    };
    let eval = |p: &ParamStore<f32>| {
        if dev.is_empty() {
            return Ok(0.0);
        }
        code_mlm_loss_on(p, cfg, dev, policy, vocab, tc.batch_size, tc.seed)
    };
    let out = train::run(params, tc, train_set.len(), micro, |_| {}, eval)?;
    Ok(MlmReport::from_outcome(out))
}

fn text_step(
    p: &ParamStore<f32>,
    cfg: &TextEncoderConfig,
    seqs: &[Vec<u32>],
    policy: &MaskingPolicy,
    vocab: &TextVocab,
    mask_stream: (u64, u64),
    drop: &mut Dropout,
    train: bool,
) -> train::MicroResult {
    let mut rng = indexed_stream(mask_stream.0, streams::MASKING, mask_stream.1);
    let (masked, labels) = text_encoder::mask_texts(seqs, policy, vocab, &mut rng);
    let batch = TextBatch::new(&masked, cfg)?;
    let targets = MlmTargets::from_labels(&labels, batch.len, 0);
    if targets.targets.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let b = if train { p.bind(&mut g) } else { p.bind_where(&mut g, |_| false) };
    let (hidden, _) = text_encoder::forward(&mut g, &b, cfg, &batch, drop)?;
    let loss = text_encoder::text_mlm_loss(&mut g, &b, hidden, &targets)?;
    let v = g.value(loss).item()? as f64;
    if !train {
        return Ok(Some((Default::default(), vec![v])));
    }
    g.backward(loss)?;
    Ok(Some((b.grads(&g), vec![v])))
}

/// Mean masked-token loss over fixed chunks with a fixed masking stream.
pub fn text_mlm_loss_on(
    params: &ParamStore<f32>,
    cfg: &TextEncoderConfig,
    seqs: &[Vec<u32>],
    policy: &MaskingPolicy,
    vocab: &TextVocab,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for (c, r) in eval_chunks(seqs.len(), batch).into_iter().enumerate() {
        let stream = (seed ^ c as u64, DEV_MASK_STREAM);
        if let Some((_, v)) = text_step(params, cfg, &seqs[r], policy, vocab, stream, &mut Dropout::off(), false)? {
            total += v[0];
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// Pre-trains the text encoder on token sequences (each starting with
/// `[CLS]`); keeps the parameters with the lowest dev MLM loss.
pub fn pretrain_text(
    params: &mut ParamStore<f32>,
    cfg: &TextEncoderConfig,
    train_set: &[Vec<u32>],
    dev: &[Vec<u32>],
    tc: &TrainConfig,
    policy: &MaskingPolicy,
    vocab: &TextVocab,
) -> Result<MlmReport> {
    cfg.validate()?;
    policy.validate()?;
    let micro = |p: &ParamStore<f32>, idx: &[usize], counter: u64| {
        let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| train_set[i].clone()).collect();
        let mut drop = Dropout::new(tc.dropout, indexed_stream(tc.seed, streams::DROPOUT, counter));
        text_step(p, cfg, &seqs, policy, vocab, (tc.seed, counter), &mut drop, true)
    };
    let eval = |p: &ParamStore<f32>| {
        if dev.is_empty() {
            return Ok(0.0);
        }
        text_mlm_loss_on(p, cfg, dev, policy, vocab, tc.batch_size, tc.seed)
    };
    let out = train::run(params, tc, train_set.len(), micro, |_| {}, eval)?;
    Ok(MlmReport::from_outcome(out))
}
