//! Sparse scaled dot-product attention over an explicit allowed-key pattern.
//!
//! The pattern is shared by all heads of one batch element. Rows with no
//! allowed key produce a zero output.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::dot;

/// Allowed key positions for every (batch element, query position).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPattern {
    batch: usize,
    len: usize,
    /// Sorted, deduplicated key lists, indexed by `b * len + i`.
    rows: Vec<Vec<u32>>,
    /// Prefix offsets into the flattened rows, length `batch * len + 1`.
    offsets: Vec<usize>,
}

impl AttentionPattern {
    /// Builds a pattern from a predicate `allowed(b, i, j)`.
    pub fn from_fn(batch: usize, len: usize, allowed: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut rows = Vec::with_capacity(batch * len);
        for b in 0..batch {
            for i in 0..len {
                rows.push((0..len).filter(|&j| allowed(b, i, j)).map(|j| j as u32).collect());
            }
        }
        Self::from_rows(batch, len, rows)
    }

    pub fn from_rows(batch: usize, len: usize, mut rows: Vec<Vec<u32>>) -> Self {
        assert_eq!(rows.len(), batch * len, "one key list per query");
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            debug_assert!(r.iter().all(|&j| (j as usize) < len));
            offsets.push(offsets.last().unwrap() + r.len());
        }
        AttentionPattern { batch, len, rows, offsets }
    }

    /// Every non-padding key is visible from every query.
    pub fn dense(valid: &[Vec<bool>]) -> Self {
        let batch = valid.len();
        let len = valid.first().map_or(0, Vec::len);
        Self::from_fn(batch, len, |b, _, j| valid[b][j])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self, b: usize, i: usize) -> &[u32] {
        &self.rows[b * self.len + i]
    }

    fn batch_span(&self, b: usize) -> (usize, usize) {
        let start = self.offsets[b * self.len];
        (start, self.offsets[(b + 1) * self.len] - start)
    }

    /// Total number of stored attention weights across heads.
    pub(crate) fn weight_count(&self, heads: usize) -> usize {
        heads * self.offsets[self.batch * self.len]
    }

    fn block_start(&self, heads: usize, b: usize, h: usize) -> usize {
        let (start, span) = self.batch_span(b);
        heads * start + h * span
    }
}

fn check_shapes(q: &[usize], k: &[usize], v: &[usize], pattern: &AttentionPattern) -> Result<()> {
    if q.len() != 4 || q != k || q != v {
        return Err(Error::shape("attention", format!("q {q:?}, k {k:?}, v {v:?} must be equal rank-4 [B,H,L,dh]")));
    }
    if q[0] != pattern.batch || q[2] != pattern.len {
        return Err(Error::shape(
            "attention",
            format!("pattern is [{}, {}] but q is {q:?}", pattern.batch, pattern.len),
        ));
    }
    Ok(())
}

/// Forward pass. Returns `(output, weights)` where weights are stored per
/// (b, h) block in pattern order.
pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    shape: &[usize],
    kshape: &[usize],
    vshape: &[usize],
    pattern: &AttentionPattern,
    scale: T,
) -> Result<(Vec<T>, Vec<T>)> {
    check_shapes(shape, kshape, vshape, pattern)?;
    let (batch, heads, len, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let blocks: Vec<(Vec<T>, Vec<T>)> = (0..batch * heads)
        .into_par_iter()
        .map(|bh| {
            let b = bh / heads;
            let base = bh * len * dh;
            let mut out = vec![T::zero(); len * dh];
            let mut weights = Vec::with_capacity(pattern.batch_span(b).1);
            for i in 0..len {
                let keys = pattern.keys(b, i);
                if keys.is_empty() {
                    continue;
                }
                let qi = &q[base + i * dh..base + (i + 1) * dh];
                let mut scores: Vec<T> = keys
                    .iter()
                    .map(|&j| {
                        let j = j as usize;
                        dot(qi, &k[base + j * dh..base + (j + 1) * dh]) * scale
                    })
                    .collect();
                let max = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let oi = &mut out[i * dh..(i + 1) * dh];
                for (s, &j) in scores.iter_mut().zip(keys) {
                    *s /= sum;
                    let j = j as usize;
                    let vj = &v[base + j * dh..base + (j + 1) * dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += *s * x;
                    }
                }
                weights.extend_from_slice(&scores);
            }
            (out, weights)
        })
        .collect();
    let mut out = Vec::with_capacity(q.len());
    let mut weights = Vec::with_capacity(pattern.weight_count(heads));
    for (o, w) in blocks {
        out.extend(o);
        weights.extend(w);
    }
    Ok((out, weights))
}

/// Backward pass; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    shape: &[usize],
    pattern: &AttentionPattern,
    weights: &[T],
    scale: T,
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (batch, heads, len, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let blocks: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..batch * heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / heads, bh % heads);
            let base = bh * len * dh;
            let mut dq = vec![T::zero(); len * dh];
            let mut dk = vec![T::zero(); len * dh];
            let mut dv = vec![T::zero(); len * dh];
            let mut w_at = pattern.block_start(heads, b, h);
            for i in 0..len {
                let keys = pattern.keys(b, i);
                let w = &weights[w_at..w_at + keys.len()];
                w_at += keys.len();
                if keys.is_empty() {
                    continue;
                }
                let doi = &d_out[base + i * dh..base + (i + 1) * dh];
                let qi = &q[base + i * dh..base + (i + 1) * dh];
                let dp: Vec<T> = keys
                    .iter()
                    .map(|&j| {
                        let j = j as usize;
                        dot(doi, &v[base + j * dh..base + (j + 1) * dh])
                    })
                    .collect();
                let mut inner = T::zero();
                for (&p, &g) in w.iter().zip(&dp) {
                    inner += p * g;
                }
                for ((&p, &g), &j) in w.iter().zip(&dp).zip(keys) {
                    let j = j as usize;
                    let ds = p * (g - inner) * scale;
                    let kj = &k[base + j * dh..base + (j + 1) * dh];
                    let vrow = &mut dv[j * dh..(j + 1) * dh];
                    for (dvx, &g_o) in vrow.iter_mut().zip(doi) {
                        *dvx += p * g_o;
                    }
                    let dqi = &mut dq[i * dh..(i + 1) * dh];
                    for (x, &kx) in dqi.iter_mut().zip(kj) {
                        *x += ds * kx;
                    }
                    let dkj = &mut dk[j * dh..(j + 1) * dh];
                    for (x, &qx) in dkj.iter_mut().zip(qi) {
                        *x += ds * qx;
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(q.len());
    let mut dv = Vec::with_capacity(q.len());
    for (a, b, c) in blocks {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_pattern_excludes_padding() {
        let valid = vec![vec![true, true, false]];
        let p = AttentionPattern::dense(&valid);
        for i in 0..3 {
            assert_eq!(p.keys(0, i), &[0, 1]);
        }
    }

    #[test]
    fn empty_row_yields_zero_output() {
        let p = AttentionPattern::from_fn(1, 2, |_, i, j| i == 0 && j == 0);
        let shape = [1, 1, 2, 2];
        let q = [1.0f64, 0.5, -0.5, 2.0];
        let (out, w) = forward(&q, &q, &q, &shape, &shape, &shape, &p, 1.0).unwrap();
        assert_eq!(&out[2..], &[0.0, 0.0]);
        assert_eq!(w, vec![1.0]);
        assert_eq!(&out[..2], &q[..2]);
    }
}
