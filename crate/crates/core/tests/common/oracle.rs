//! Brute-force references written from the definitions, independent of the
//! library code paths.

use notecode::rng::StreamRng;
use rand::Rng;

/// AUC by enumerating every positive/negative pair, ties ½.
pub fn auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn f1_of(tp: f64, fp: f64, fn_: f64) -> f64 {
    if tp + fp + fn_ == 0.0 {
        0.0
    } else {
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn counts(t: &[bool], p: &[bool]) -> (f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0);
    for (&a, &b) in t.iter().zip(p) {
        if a && b {
            c.0 += 1.0;
        } else if b {
            c.1 += 1.0;
        } else if a {
            c.2 += 1.0;
        }
    }
    c
}

fn column<T: Copy>(m: &[Vec<T>], j: usize) -> Vec<T> {
    m.iter().map(|r| r[j]).collect()
}

/// `(micro, macro)` F1 from precision and recall.
pub fn f1(y_true: &[Vec<bool>], y_pred: &[Vec<bool>]) -> (f64, f64) {
    let flat_t: Vec<bool> = y_true.concat();
    let flat_p: Vec<bool> = y_pred.concat();
    let (tp, fp, fn_) = counts(&flat_t, &flat_p);
    let l = y_true[0].len();
    let macro_f1 = (0..l)
        .map(|j| {
            let (a, b, c) = counts(&column(y_true, j), &column(y_pred, j));
            f1_of(a, b, c)
        })
        .sum::<f64>()
        / l as f64;
    (f1_of(tp, fp, fn_), macro_f1)
}

/// `(micro AUC, macro AUC over labels with both classes)`.
pub fn auc_pair(y_true: &[Vec<bool>], y_score: &[Vec<f64>]) -> (Option<f64>, Option<f64>) {
    let micro = auc(&y_true.concat(), &y_score.concat());
    let per: Vec<f64> = (0..y_true[0].len()).filter_map(|j| auc(&column(y_true, j), &column(y_score, j))).collect();
    let macro_auc = (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64);
    (micro, macro_auc)
}

/// P@k and R@k by selecting the top `k` one at a time, lowest index
/// winning ties.
pub fn precision_recall_at(y_true: &[Vec<bool>], y_score: &[Vec<f64>], k: usize) -> (f64, f64) {
    let (mut p, mut r, mut nr) = (0.0, 0.0, 0);
    for (t, s) in y_true.iter().zip(y_score) {
        let mut taken = vec![false; s.len()];
        let mut hits = 0;
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..s.len() {
                if !taken[j] && best.is_none_or(|b| s[j] > s[b]) {
                    best = Some(j);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            hits += usize::from(t[b]);
        }
        p += hits as f64 / k as f64;
        let n = t.iter().filter(|&&y| y).count();
        if n > 0 {
            r += hits as f64 / n as f64;
            nr += 1;
        }
    }
    (p / y_true.len() as f64, if nr == 0 { 0.0 } else { r / nr as f64 })
}

/// Candidate thresholds are midpoints between adjacent distinct scores;
/// the best F1 wins and ties go to the smallest threshold.
pub fn best_threshold(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best: Option<(f64, f64)> = None;
    for w in distinct.windows(2) {
        let t = 0.5 * (w[1] + w[0]);
        let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        let (a, b, c) = counts(labels, &pred);
        let f = f1_of(a, b, c);
        if best.is_none_or(|(bf, _)| f > bf + 1e-15) {
            best = Some((f, t));
        }
    }
    best.map(|(_, t)| t)
}

/// Symmetric InfoNCE by explicit enumeration of every pair.
pub fn info_nce(t: &[Vec<f64>], d: &[Vec<f64>], tau: f64) -> f64 {
    let n = t.len();
    let sim = |i: usize, j: usize| t[i].iter().zip(&d[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| sim(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| sim(j, i).exp()).sum();
        total += -(sim(i, i).exp() / row).ln() - (sim(i, i).exp() / col).ln();
    }
    total / (2.0 * n as f64)
}

/// Random multi-label instance with coarse scores so ties occur.
pub fn instance(rng: &mut StreamRng) -> (Vec<Vec<bool>>, Vec<Vec<f64>>) {
    let n = rng.random_range(2..9);
    let l = rng.random_range(1..7);
    let coarse = rng.random_bool(0.5);
    let y_true = (0..n).map(|_| (0..l).map(|_| rng.random_bool(0.4)).collect()).collect();
    let y_score = (0..n)
        .map(|_| {
            (0..l)
                .map(|_| if coarse { rng.random_range(0..4) as f64 / 4.0 } else { rng.random::<f64>() })
                .collect()
        })
        .collect();
    (y_true, y_score)
}
