//! Downstream adaptation: code-description contrastive fine-tuning, cloze
//! prompt classification with a two-token verbalizer, and re-ranking of an
//! external ranker's candidates.
//!
//! A prompt is laid out as
//! `[CLS] note [SEP] desc_1 [MASK] desc_2 [MASK] …`; the score of label `i`
//! is the probability of `[POS]` against `[NEG]` at its mask. Mask positions
//! are global attention tokens so every label sees the whole note.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::code_encoder::EncounterSequence;
use crate::contrastive::{self, ContrastiveOptions, DualConfig, Pair, TrainReport};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Bound, Dropout, ParamStore};
use crate::optim::TrainConfig;
use crate::rng::{indexed_stream, streams};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};
use crate::text_encoder::{self, TextBatch, TextEncoderConfig};
use crate::tokenize::{CodeVocab, TextVocab};
use crate::train;

/// Verbalizer columns: index 0 is `[POS]`, index 1 is `[NEG]`.
pub const VERBALIZER: [usize; 2] = [TextVocab::POS as usize, TextVocab::NEG as usize];

/// Description/code pairs for every described code in the vocabulary.
/// Codes unknown to the vocabulary are skipped with a warning.
pub fn description_pairs(descriptions: &BTreeMap<String, String>, text_vocab: &TextVocab, code_vocab: &CodeVocab, cfg: &DualConfig) -> Vec<Pair> {
    descriptions
        .iter()
        .filter(|(code, _)| {
            let known = code_vocab.contains(code);
            if !known {
                log::warn!("description for unknown code {code} skipped");
            }
            known
        })
        .map(|(code, text)| Pair {
            id: code.clone(),
            text: text_vocab.encode_text(text, cfg.text.max_len),
            codes: EncounterSequence::single_encounter(code, &[code], code_vocab),
        })
        .collect()
}

/// Contrastive fine-tuning where the text is a code description and the
/// code side is that single code. Dev selection uses the training pairs.
pub fn finetune_icd_descriptions(
    params: &mut ParamStore<f32>,
    cfg: &DualConfig,
    descriptions: &BTreeMap<String, String>,
    text_vocab: &TextVocab,
    code_vocab: &CodeVocab,
    tc: &TrainConfig,
) -> Result<TrainReport> {
    let pairs = description_pairs(descriptions, text_vocab, code_vocab, cfg);
    if pairs.is_empty() {
        return Err(Error::Data("no usable code descriptions".into()));
    }
    let opts = ContrastiveOptions {
        text_mlm: false,
        ..ContrastiveOptions::default()
    };
    contrastive::train_contrastive(params, cfg, &pairs, &pairs, tc, &opts, text_vocab)
}

/// One assembled cloze input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBatch {
    pub ids: Vec<u32>,
    pub mask_positions: Vec<usize>,
    /// Label of each mask position, in the caller's order.
    pub labels: Vec<String>,
}

/// Assembles `[CLS] note [SEP] desc_1 [MASK] …`. `note` holds plain tokens
/// without specials. The note is truncated first; prompts are never cut.
pub fn build_prompt(note: &[u32], labels: &[(String, Vec<u32>)], max_len: usize) -> Result<PromptBatch> {
    if labels.is_empty() {
        return Err(Error::Invalid("a prompt needs at least one label".into()));
    }
    let prompt_len: usize = labels.iter().map(|(_, d)| d.len() + 1).sum();
    if prompt_len + 2 > max_len {
        return Err(Error::Invalid(format!(
            "label prompts need {} tokens but max_len is {max_len}; split the label set into chunks",
            prompt_len + 2
        )));
    }
    let keep = note.len().min(max_len - prompt_len - 2);
    let mut ids = Vec::with_capacity(keep + prompt_len + 2);
    ids.push(TextVocab::CLS);
    ids.extend_from_slice(&note[..keep]);
    ids.push(TextVocab::SEP);
    let mut mask_positions = Vec::with_capacity(labels.len());
    for (_, desc) in labels {
        ids.extend_from_slice(desc);
        mask_positions.push(ids.len());
        ids.push(TextVocab::MASK);
    }
    Ok(PromptBatch {
        ids,
        mask_positions,
        labels: labels.iter().map(|(c, _)| c.clone()).collect(),
    })
}

/// Verbalizer logits `[M, 2]` for a batch of prompts, plus the hidden
/// states.
fn verbalizer_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &TextEncoderConfig, prompts: &[&PromptBatch], drop: &mut Dropout) -> Result<Var> {
    let ids: Vec<Vec<u32>> = prompts.iter().map(|b| b.ids.clone()).collect();
    let masks: Vec<Vec<usize>> = prompts.iter().map(|b| b.mask_positions.clone()).collect();
    let batch = TextBatch::new(&ids, cfg)?.with_globals(&masks);
    let (hidden, _) = text_encoder::forward(g, p, cfg, &batch, drop)?;
    let positions: Vec<usize> = masks.iter().enumerate().flat_map(|(b, m)| m.iter().map(move |&i| b * batch.len + i)).collect();
    text_encoder::token_logits(g, p, hidden, &positions, &VERBALIZER)
}

fn pos_probability(pos: f64, neg: f64) -> f64 {
    1.0 / (1.0 + (neg - pos).exp())
}

/// Probability of `[POS]` at every mask, per prompt in label order.
pub fn score_labels<T: Scalar>(params: &ParamStore<T>, cfg: &TextEncoderConfig, prompts: &[PromptBatch], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let p = params.bind_where(&mut g, |_| false);
        let refs: Vec<&PromptBatch> = chunk.iter().collect();
        let logits = verbalizer_logits(&mut g, &p, cfg, &refs, &mut Dropout::off())?;
        let v = g.value(logits);
        let mut row = 0;
        for b in chunk {
            out.push(
                (0..b.mask_positions.len())
                    .map(|i| {
                        let r = v.row(row + i);
                        pos_probability(r[0].as_f64(), r[1].as_f64())
                    })
                    .collect(),
            );
            row += b.mask_positions.len();
        }
    }
    Ok(out)
}

/// Fixed label space with tokenized descriptions. Labels are split into
/// consecutive groups of `labels_per_prompt`, one prompt per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTask {
    pub codes: Vec<String>,
    pub descriptions: Vec<Vec<u32>>,
    pub labels_per_prompt: usize,
}

impl PromptTask {
    pub fn new(codes: &[String], descriptions: &BTreeMap<String, String>, vocab: &TextVocab, labels_per_prompt: usize) -> Result<Self> {
        if codes.is_empty() || labels_per_prompt == 0 {
            return Err(Error::Invalid("a prompt task needs labels and a positive group size".into()));
        }
        let descriptions = codes
            .iter()
            .map(|c| {
                descriptions
                    .get(c)
                    .map(|d| vocab.encode(d))
                    .ok_or_else(|| Error::Data(format!("label {c} has no description")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptTask {
            codes: codes.to_vec(),
            descriptions,
            labels_per_prompt,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// One prompt per label group, in label order.
    pub fn prompts(&self, note: &[u32], max_len: usize) -> Result<Vec<PromptBatch>> {
        let labels: Vec<(String, Vec<u32>)> = self.codes.iter().cloned().zip(self.descriptions.iter().cloned()).collect();
        labels.chunks(self.labels_per_prompt).map(|group| build_prompt(note, group, max_len)).collect()
    }

    /// Membership of every task label in `codes`.
    pub fn gold(&self, codes: &[String]) -> Vec<bool> {
        let set: HashSet<&str> = codes.iter().map(String::as_str).collect();
        self.codes.iter().map(|c| set.contains(c.as_str())).collect()
    }

    /// Prompt examples for notes given as `(id, text, codes)`; every note
    /// yields one example per label group, consecutively.
    pub fn examples(&self, notes: &[(String, String, Vec<String>)], vocab: &TextVocab, max_len: usize) -> Result<Vec<PromptExample>> {
        let mut out = Vec::new();
        for (id, text, codes) in notes {
            let gold = self.gold(codes);
            for (prompt, g) in self.prompts(&vocab.encode(text), max_len)?.into_iter().zip(gold.chunks(self.labels_per_prompt)) {
                out.push(PromptExample {
                    id: id.clone(),
                    prompt,
                    gold: g.to_vec(),
                });
            }
        }
        Ok(out)
    }
}

/// One prompt of one note with the gold membership of its labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub id: String,
    pub prompt: PromptBatch,
    pub gold: Vec<bool>,
}

/// Per-note rows rebuilt from consecutive examples sharing an id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoteScores {
    pub ids: Vec<String>,
    pub gold: Vec<Vec<bool>>,
    pub scores: Vec<Vec<f64>>,
}

pub fn assemble(examples: &[PromptExample], scores: &[Vec<f64>]) -> NoteScores {
    let mut out = NoteScores::default();
    for (e, s) in examples.iter().zip(scores) {
        if out.ids.last() != Some(&e.id) {
            out.ids.push(e.id.clone());
            out.gold.push(Vec::new());
            out.scores.push(Vec::new());
        }
        out.gold.last_mut().expect("pushed").extend_from_slice(&e.gold);
        out.scores.last_mut().expect("pushed").extend_from_slice(s);
    }
    out
}

/// Scores every example and regroups them per note.
pub fn score_examples(params: &ParamStore<f32>, cfg: &TextEncoderConfig, examples: &[PromptExample], batch: usize) -> Result<NoteScores> {
    let prompts: Vec<PromptBatch> = examples.iter().map(|e| e.prompt.clone()).collect();
    Ok(assemble(examples, &score_labels(params, cfg, &prompts, batch)?))
}

/// Dev criterion: the mean of macro and micro AUC when defined, otherwise
/// the negated mean verbalizer cross-entropy. Higher is better.
pub fn prompt_dev_score(params: &ParamStore<f32>, cfg: &TextEncoderConfig, dev: &[PromptExample], batch: usize) -> Result<f64> {
    let ns = score_examples(params, cfg, dev, batch)?;
    Ok(match metrics::auc_scores(&ns.gold, &ns.scores) {
        Ok(a) => 0.5 * (a.macro_ + a.micro),
        Err(_) => {
            let (mut ce, mut n) = (0.0, 0usize);
            for (s, g) in ns.scores.iter().flatten().zip(ns.gold.iter().flatten()) {
                ce -= if *g { s.max(1e-12).ln() } else { (1.0 - s).max(1e-12).ln() };
                n += 1;
            }
            -ce / n.max(1) as f64
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    /// `(step, mean verbalizer cross-entropy)`.
    pub curve: Vec<(usize, f64)>,
    /// `(step, dev score)`, higher is better.
    pub dev: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_dev_score: f64,
}

/// Fine-tunes the text encoder and its MLM head with binary cross-entropy
/// at every mask position. Keeps the parameters with the best dev score.
pub fn finetune_prompt(
    params: &mut ParamStore<f32>,
    cfg: &TextEncoderConfig,
    train_set: &[PromptExample],
    dev: &[PromptExample],
    tc: &TrainConfig,
) -> Result<PromptReport> {
    cfg.validate()?;
    for e in train_set.iter().chain(dev) {
        if e.gold.len() != e.prompt.mask_positions.len() {
            return Err(Error::Invalid(format!("example {}: gold labels do not match mask count", e.id)));
        }
    }
    let micro = |p: &ParamStore<f32>, idx: &[usize], counter: u64| -> train::MicroResult {
        let refs: Vec<&PromptBatch> = idx.iter().map(|&i| &train_set[i].prompt).collect();
        let targets: Vec<i64> = idx.iter().flat_map(|&i| train_set[i].gold.iter().map(|&g| if g { 0 } else { 1 })).collect();
        let mut g = Graph::new();
        let b = p.bind_where(&mut g, |n| n.starts_with(text_encoder::PREFIX));
        let mut drop = Dropout::new(tc.dropout, indexed_stream(tc.seed, streams::DROPOUT, counter));
        let logits = verbalizer_logits(&mut g, &b, cfg, &refs, &mut drop)?;
        let loss = g.cross_entropy(logits, &targets, -1)?;
        let v = g.value(loss).item()?.as_f64();
        g.backward(loss)?;
        Ok(Some((b.grads(&g), vec![v])))
    };
    let eval = |p: &ParamStore<f32>| -> Result<f64> {
        if dev.is_empty() {
            return Ok(0.0);
        }
        Ok(-prompt_dev_score(p, cfg, dev, tc.batch_size)?)
    };
    let out = train::run(params, tc, train_set.len(), micro, |_| {}, eval)?;
    Ok(PromptReport {
        curve: out.logs.iter().map(|l| (l.step, l.components.first().copied().unwrap_or(f64::NAN))).collect(),
        dev: out.dev.iter().map(|&(s, v)| (s, -v)).collect(),
        best_step: out.best_step,
        best_dev_score: -out.best_dev,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub code: String,
    pub score: f64,
}

/// Blends min-max normalized base scores with model scores,
/// `α·base + (1-α)·model`, and sorts descending. The sort is stable, so
/// α = 1 reproduces the input order exactly. Equal base scores normalize
/// to 1.
pub fn rerank(candidates: &[Candidate], model: &[f64], alpha: f64) -> Result<Vec<Candidate>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if candidates.len() != model.len() {
        return Err(Error::Invalid(format!("{} candidates but {} model scores", candidates.len(), model.len())));
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let lo = candidates.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);
    let hi = candidates.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<Candidate> = candidates
        .iter()
        .zip(model)
        .map(|(c, &m)| {
            let base = if hi > lo { (c.score - lo) / (hi - lo) } else { 1.0 };
            Candidate {
                code: c.code.clone(),
                score: alpha * base + (1.0 - alpha) * m,
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Candidates of one instance with model scores and the gold code set.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankInstance {
    pub id: String,
    pub candidates: Vec<Candidate>,
    pub model: Vec<f64>,
    pub gold: HashSet<String>,
}

/// Mean precision of the top `k` codes after re-ranking at `alpha`.
pub fn rerank_precision_at(instances: &[RerankInstance], alpha: f64, k: usize) -> Result<f64> {
    if instances.is_empty() || k == 0 {
        return Err(Error::Invalid("need instances and k >= 1".into()));
    }
    let mut total = 0.0;
    for inst in instances {
        let ranked = rerank(&inst.candidates, &inst.model, alpha)?;
        let hits = ranked.iter().take(k).filter(|c| inst.gold.contains(&c.code)).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / instances.len() as f64)
}

/// α from `grid` with the best dev P@k; ties go to the larger α.
pub fn tune_alpha(dev: &[RerankInstance], grid: &[f64], k: usize) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &a in grid {
        let p = rerank_precision_at(dev, a, k)?;
        let better = match best {
            None => true,
            Some((ba, bp)) => p > bp || (p == bp && a > ba),
        };
        if better {
            best = Some((a, p));
        }
    }
    best.ok_or_else(|| Error::Invalid("empty alpha grid".into()))
}

pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Deserialize, Serialize)]
struct CandidateRow {
    instance_id: String,
    code: String,
    score: f64,
}

/// Reads `instance_id,code,score` rows; each instance's list is sorted by
/// descending score (stable in file order).
pub fn load_candidates(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Candidate>>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    for (n, row) in r.deserialize::<CandidateRow>().enumerate() {
        let row = row?;
        if !row.score.is_finite() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: n + 2,
                msg: "score is not finite".into(),
            });
        }
        out.entry(row.instance_id).or_default().push(Candidate {
            code: row.code,
            score: row.score,
        });
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    Ok(out)
}

pub fn write_candidates(path: impl AsRef<Path>, candidates: &BTreeMap<String, Vec<Candidate>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (id, list) in candidates {
        for c in list {
            w.serialize(CandidateRow {
                instance_id: id.clone(),
                code: c.code.clone(),
                score: c.score,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub scores: BTreeMap<String, f64>,
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let mut s = String::new();
    for p in preds {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(scores: &[f64]) -> Vec<Candidate> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Candidate {
                code: format!("c{i}"),
                score: s,
            })
            .collect()
    }

    #[test]
    fn prompt_layout() {
        let note: Vec<u32> = (100..110).collect();
        let labels = vec![("a".to_string(), vec![20, 21, 22]), ("b".to_string(), vec![30, 31, 32])];
        let p = build_prompt(&note, &labels, 64).unwrap();
        assert_eq!(p.mask_positions, vec![15, 19]);
        assert_eq!(p.ids[0], TextVocab::CLS);
        assert_eq!(p.ids[11], TextVocab::SEP);
        assert_eq!(p.ids.len(), 20);
        let short = build_prompt(&note, &labels, 14).unwrap();
        assert_eq!(short.ids.len(), 14);
        assert_eq!(short.mask_positions, vec![9, 13]);
        assert_eq!(&short.ids[1..5], &[100, 101, 102, 103]);
        assert!(build_prompt(&note, &labels, 9).is_err());
        assert!(build_prompt(&note, &[], 64).is_err());
    }

    #[test]
    fn rerank_contract() {
        let c = cands(&[0.9, 0.1]);
        let r = rerank(&c, &[0.2, 0.8], 0.5).unwrap();
        assert_eq!(r[0].code, "c0");
        assert!((r[0].score - 0.6).abs() < 1e-12 && (r[1].score - 0.4).abs() < 1e-12);
        let c = cands(&[5.0, 3.0, 3.0, 1.0]);
        let ids = |v: Vec<Candidate>| v.into_iter().map(|c| c.code).collect::<Vec<_>>();
        assert_eq!(ids(rerank(&c, &[0.0, 0.9, 0.1, 1.0], 1.0).unwrap()), vec!["c0", "c1", "c2", "c3"]);
        assert_eq!(ids(rerank(&c, &[0.0, 0.9, 0.1, 1.0], 0.0).unwrap()), vec!["c3", "c1", "c2", "c0"]);
        assert!(rerank(&[], &[], 0.3).unwrap().is_empty());
        assert!(rerank(&c, &[0.0; 4], 1.5).is_err());
    }

    #[test]
    fn verbalizer_symmetry() {
        assert_eq!(pos_probability(1.3, 1.3), 0.5);
        assert!(pos_probability(15.0, -15.0) < 1.0);
        assert!(pos_probability(-300.0, 300.0) >= 0.0);
    }
}
