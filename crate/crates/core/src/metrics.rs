//! Multi-label evaluation: F1, AUC, precision/recall at K and dev-set
//! threshold selection.
//!
//! Conventions:
//!
//! * a label with no true and no predicted positives has F1 = 0;
//! * AUC counts tied positive/negative pairs as ½; labels lacking either
//!   class are left out of the macro average and listed in the report;
//! * top-K ties are broken by ascending label index;
//! * a cell is predicted positive when its score is at least the threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_shape<A, B>(y_true: &[Vec<A>], other: &[Vec<B>]) -> Result<usize> {
    if y_true.is_empty() || y_true[0].is_empty() {
        return Err(Error::Metric("empty label matrix".into()));
    }
    let l = y_true[0].len();
    if other.len() != y_true.len() || y_true.iter().chain_lens(other).any(|n| n != l) {
        return Err(Error::Metric("label matrices differ in shape or are ragged".into()));
    }
    Ok(l)
}

trait ChainLens {
    fn chain_lens<B>(self, other: &[Vec<B>]) -> Box<dyn Iterator<Item = usize> + '_>
    where
        Self: Sized;
}

impl<'a, A> ChainLens for std::slice::Iter<'a, Vec<A>> {
    fn chain_lens<B>(self, other: &[Vec<B>]) -> Box<dyn Iterator<Item = usize> + '_> {
        let mine: Vec<usize> = self.map(Vec::len).collect();
        Box::new(mine.into_iter().chain(other.iter().map(Vec::len)))
    }
}

fn check_scores(scores: &[Vec<f64>]) -> Result<()> {
    if scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = 2 * tp + fp + fn_;
    if d == 0 {
        0.0
    } else {
        2.0 * tp as f64 / d as f64
    }
}

/// Per-label `(tp, fp, fn)`.
fn confusion(y_true: &[Vec<bool>], y_pred: &[Vec<bool>], l: usize) -> Vec<(usize, usize, usize)> {
    let mut c = vec![(0, 0, 0); l];
    for (t, p) in y_true.iter().zip(y_pred) {
        for j in 0..l {
            match (t[j], p[j]) {
                (true, true) => c[j].0 += 1,
                (false, true) => c[j].1 += 1,
                (true, false) => c[j].2 += 1,
                (false, false) => {}
            }
        }
    }
    c
}

/// `(micro F1, macro F1)`.
pub fn f1_scores(y_true: &[Vec<bool>], y_pred: &[Vec<bool>]) -> Result<(f64, f64)> {
    let l = check_shape(y_true, y_pred)?;
    let c = confusion(y_true, y_pred, l);
    let (tp, fp, fn_) = c.iter().fold((0, 0, 0), |a, x| (a.0 + x.0, a.1 + x.1, a.2 + x.2));
    let macro_f1 = c.iter().map(|&(a, b, d)| f1(a, b, d)).sum::<f64>() / l as f64;
    Ok((f1(tp, fp, fn_), macro_f1))
}

/// Mann-Whitney AUC with ties counted ½; `None` unless both classes occur.
pub fn binary_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Counts 2·U to stay in integers: each tie group contributes
    // 2·(negatives below) + (negatives inside) per positive.
    let (mut twice_u, mut neg_below) = (0u128, 0u128);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let p = idx[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let n = (j - i) as u128 - p;
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Some(twice_u as f64 / (2 * pos * neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucScores {
    pub micro: f64,
    pub macro_: f64,
    /// Labels left out of the macro average.
    pub excluded: Vec<usize>,
}

pub fn auc_scores(y_true: &[Vec<bool>], y_score: &[Vec<f64>]) -> Result<AucScores> {
    let l = check_shape(y_true, y_score)?;
    check_scores(y_score)?;
    let flat_t: Vec<bool> = y_true.iter().flatten().copied().collect();
    let flat_s: Vec<f64> = y_score.iter().flatten().copied().collect();
    let micro = binary_auc(&flat_t, &flat_s).ok_or_else(|| Error::Metric("micro AUC needs both classes".into()))?;
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, Vec::new());
    for j in 0..l {
        let t: Vec<bool> = y_true.iter().map(|r| r[j]).collect();
        let s: Vec<f64> = y_score.iter().map(|r| r[j]).collect();
        match binary_auc(&t, &s) {
            Some(a) => {
                sum += a;
                n += 1;
            }
            None => excluded.push(j),
        }
    }
    if n == 0 {
        return Err(Error::Metric("no label has both classes; macro AUC undefined".into()));
    }
    Ok(AucScores {
        micro,
        macro_: sum / n as f64,
        excluded,
    })
}

/// Label indices of the `k` highest scores, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `(P@k, R@k)` averaged over instances; R@k skips instances without true
/// labels (0 when none remain).
pub fn precision_recall_at_k(y_true: &[Vec<bool>], y_score: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    let l = check_shape(y_true, y_score)?;
    check_scores(y_score)?;
    if k == 0 || k > l {
        return Err(Error::Metric(format!("k = {k} must be in 1..={l}")));
    }
    let (mut p, mut r, mut nr) = (0.0, 0.0, 0usize);
    for (t, s) in y_true.iter().zip(y_score) {
        let hits = top_k(s, k).iter().filter(|&&j| t[j]).count();
        p += hits as f64 / k as f64;
        let n_true = t.iter().filter(|&&y| y).count();
        if n_true > 0 {
            r += hits as f64 / n_true as f64;
            nr += 1;
        }
    }
    Ok((p / y_true.len() as f64, if nr == 0 { 0.0 } else { r / nr as f64 }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Global,
    PerLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thresholds {
    Global(f64),
    PerLabel(Vec<f64>),
}

impl Thresholds {
    pub fn for_label(&self, j: usize) -> f64 {
        match self {
            Thresholds::Global(t) => *t,
            Thresholds::PerLabel(v) => v[j],
        }
    }

    pub fn apply(&self, y_score: &[Vec<f64>]) -> Vec<Vec<bool>> {
        y_score
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, &s)| s >= self.for_label(j)).collect())
            .collect()
    }
}

pub const FALLBACK_THRESHOLD: f64 = 0.5;

/// Best midpoint threshold for `(score, label)` cells under the F1 of
/// `tp, fp, fn` offsets carried in from other labels (zero for a lone
/// label). Ties go to the smaller threshold.
fn scan(cells: &mut [(f64, bool)]) -> Option<f64> {
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = cells.iter().filter(|c| c.1).count();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < cells.len() {
        let mut j = i;
        while j < cells.len() && cells[j].0 == cells[i].0 {
            tp += usize::from(cells[j].1);
            fp += usize::from(!cells[j].1);
            j += 1;
        }
        if j == cells.len() {
            break;
        }
        let t = 0.5 * (cells[i].0 + cells[j].0);
        let score = f1(tp, fp, total_pos - tp);
        if best.is_none_or(|(bs, _)| score >= bs) {
            best = Some((score, t));
        }
        i = j;
    }
    best.map(|(_, t)| t)
}

/// Dev-set thresholds maximizing micro F1 (global) or each label's F1
/// (per label). Degenerate inputs with a single distinct score fall back
/// to [`FALLBACK_THRESHOLD`].
pub fn select_threshold(y_true: &[Vec<bool>], y_score: &[Vec<f64>], mode: ThresholdMode) -> Result<Thresholds> {
    let l = check_shape(y_true, y_score)?;
    check_scores(y_score)?;
    let pick = |cells: &mut Vec<(f64, bool)>| {
        scan(cells).unwrap_or_else(|| {
            log::warn!("all dev scores identical; using threshold {FALLBACK_THRESHOLD}");
            FALLBACK_THRESHOLD
        })
    };
    Ok(match mode {
        ThresholdMode::Global => {
            let mut cells: Vec<(f64, bool)> = y_score.iter().zip(y_true).flat_map(|(s, t)| s.iter().copied().zip(t.iter().copied())).collect();
            Thresholds::Global(pick(&mut cells))
        }
        ThresholdMode::PerLabel => Thresholds::PerLabel(
            (0..l)
                .map(|j| {
                    let mut cells: Vec<(f64, bool)> = y_score.iter().zip(y_true).map(|(s, t)| (s[j], t[j])).collect();
                    pick(&mut cells)
                })
                .collect(),
        ),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: String,
    pub support: usize,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub precision_at: BTreeMap<usize, f64>,
    pub recall_at: BTreeMap<usize, f64>,
    pub thresholds: Thresholds,
    pub auc_excluded: Vec<String>,
    pub per_label: Vec<LabelRow>,
}

pub const PRECISION_KS: [usize; 3] = [5, 8, 15];
pub const RECALL_KS: [usize; 2] = [8, 15];

/// Full report at the given thresholds. K values above the label count are
/// omitted.
pub fn evaluate(labels: &[String], y_true: &[Vec<bool>], y_score: &[Vec<f64>], thresholds: &Thresholds) -> Result<MetricsReport> {
    let l = check_shape(y_true, y_score)?;
    if labels.len() != l {
        return Err(Error::Metric(format!("{} label names for {l} columns", labels.len())));
    }
    let pred = thresholds.apply(y_score);
    let (micro_f1, macro_f1) = f1_scores(y_true, &pred)?;
    let auc = auc_scores(y_true, y_score)?;
    let mut precision_at = BTreeMap::new();
    let mut recall_at = BTreeMap::new();
    for k in PRECISION_KS.into_iter().filter(|&k| k <= l) {
        precision_at.insert(k, precision_recall_at_k(y_true, y_score, k)?.0);
    }
    for k in RECALL_KS.into_iter().filter(|&k| k <= l) {
        recall_at.insert(k, precision_recall_at_k(y_true, y_score, k)?.1);
    }
    let conf = confusion(y_true, &pred, l);
    let per_label = (0..l)
        .map(|j| {
            let t: Vec<bool> = y_true.iter().map(|r| r[j]).collect();
            let s: Vec<f64> = y_score.iter().map(|r| r[j]).collect();
            LabelRow {
                label: labels[j].clone(),
                support: t.iter().filter(|&&y| y).count(),
                f1: f1(conf[j].0, conf[j].1, conf[j].2),
                auc: binary_auc(&t, &s),
            }
        })
        .collect();
    Ok(MetricsReport {
        macro_auc: auc.macro_,
        micro_auc: auc.micro,
        macro_f1,
        micro_f1,
        precision_at,
        recall_at,
        thresholds: thresholds.clone(),
        auc_excluded: auc.excluded.iter().map(|&j| labels[j].clone()).collect(),
        per_label,
    })
}

impl MetricsReport {
    /// Fixed-width table: AUC macro/micro, F1 macro/micro, P@5.
    pub fn table(&self, name: &str) -> String {
        let p5 = self.precision_at.get(&5).map_or("-".to_string(), |p| format!("{:.1}", 100.0 * p));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24}{:>10}{:>10}{:>10}{:>10}{:>8}",
            "Model", "AUC Macro", "AUC Micro", "F1 Macro", "F1 Micro", "P@5"
        );
        let _ = writeln!(
            s,
            "{:<24}{:>10.1}{:>10.1}{:>10.1}{:>10.1}{:>8}",
            name,
            100.0 * self.macro_auc,
            100.0 * self.micro_auc,
            100.0 * self.macro_f1,
            100.0 * self.micro_f1,
            p5
        );
        s
    }
}
