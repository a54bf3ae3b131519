//! Embedding alignment diagnostics: orthogonal Procrustes, cross-space
//! retrieval accuracy, PCA and the embedding CSV format.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Copies a rank-2 tensor into an `f64` matrix.
pub fn to_matrix<T: Scalar>(t: &Tensor<T>) -> Result<DMatrix<f64>> {
    match t.shape() {
        [n, p] => Ok(DMatrix::from_row_iterator(*n, *p, t.data().iter().map(|v| v.as_f64()))),
        s => Err(Error::shape("to_matrix", format!("expected a matrix, got shape {s:?}"))),
    }
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean: RowDVector<f64> = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct Procrustes {
    pub rotation: DMatrix<f64>,
    pub scale: f64,
    pub disparity: f64,
}

/// Best orthogonal `R` (and optional scale) minimizing `‖s·X·R − Y‖_F`
/// after centering both sets. Disparity is the residual over `‖Y‖²_F`.
pub fn orthogonal_procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>, allow_scale: bool) -> Result<Procrustes> {
    if x.shape() != y.shape() {
        return Err(Error::shape("procrustes", format!("inputs differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.nrows() < 2 || x.ncols() == 0 {
        return Err(Error::Invalid("procrustes needs at least two points".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "procrustes" });
    }
    let (xc, yc) = (centered(x), centered(y));
    let y_norm = yc.norm_squared();
    if y_norm == 0.0 {
        return Err(Error::Invalid("target set has zero spread".into()));
    }
    let svd = (xc.transpose() * &yc).svd(true, true);
    let sv = &svd.singular_values;
    let top = sv.max();
    if sv.iter().any(|&s| s <= top * 1e-12) {
        log::warn!("X^T Y is rank deficient; rotation is not unique on degenerate axes");
    }
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Invalid("svd did not converge".into())),
    };
    let rotation = u * vt;
    let scale = if allow_scale {
        let xn = xc.norm_squared();
        if xn == 0.0 {
            return Err(Error::Invalid("source set has zero spread".into()));
        }
        sv.sum() / xn
    } else {
        1.0
    };
    let disparity = (&xc * &rotation * scale - &yc).norm_squared() / y_norm;
    Ok(Procrustes { rotation, scale, disparity })
}

fn unit_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Fraction of rows `i` of `t` whose partner `d[i]` is among the `k`
/// nearest rows of `d` by cosine. Ties count against the partner.
pub fn retrieval_accuracy(t: &DMatrix<f64>, d: &DMatrix<f64>, k: usize) -> Result<f64> {
    if t.shape() != d.shape() {
        return Err(Error::shape("retrieval", format!("inputs differ: {:?} vs {:?}", t.shape(), d.shape())));
    }
    let n = t.nrows();
    if k == 0 || k >= n {
        return Err(Error::Invalid(format!("k must lie in [1, n), got k={k} with n={n}")));
    }
    let sims = unit_rows(t) * unit_rows(d).transpose();
    let hits = (0..n)
        .filter(|&i| {
            let own = sims[(i, i)];
            let ahead = (0..n).filter(|&j| j != i && sims[(i, j)] >= own).count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// First two principal-component scores of the rows. Each component's sign
/// is fixed so its largest-magnitude loading is positive.
pub fn pca_2d(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() < 2 || x.ncols() < 2 {
        return Err(Error::Invalid("pca needs at least two rows and two columns".into()));
    }
    let xc = centered(x);
    let svd = xc.clone().svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Invalid("svd did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = DMatrix::zeros(x.ncols(), 2);
    for (c, &k) in order.iter().take(2).enumerate() {
        let mut v = vt.row(k).transpose();
        let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v = -v;
        }
        basis.set_column(c, &v);
    }
    Ok(xc * basis)
}

/// Named rows from one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub tag: String,
    pub matrix: DMatrix<f64>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, tag: impl Into<String>, matrix: DMatrix<f64>) -> Result<Self> {
        if ids.len() != matrix.nrows() {
            return Err(Error::shape("embeddings", format!("{} ids for {} rows", ids.len(), matrix.nrows())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|i| !seen.insert(i.as_str())) {
            return Err(Error::Data(format!("duplicate embedding id {dup}")));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "embedding export" });
        }
        Ok(EmbeddingSet { ids, tag: tag.into(), matrix })
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `id,tag,v0,…,v{p-1}` rows for every set, plus `pc0,pc1` computed
/// jointly over all rows when `with_pca` is set.
pub fn write_embeddings(path: impl AsRef<Path>, sets: &[EmbeddingSet], with_pca: bool) -> Result<()> {
    let p = sets.first().map_or(0, |s| s.matrix.ncols());
    if sets.iter().any(|s| s.matrix.ncols() != p) {
        return Err(Error::shape("embeddings", "embedding sets differ in width"));
    }
    let n: usize = sets.iter().map(|s| s.matrix.nrows()).sum();
    let pcs = if with_pca {
        let all = DMatrix::from_fn(n, p, |r, c| {
            let mut r = r;
            for s in sets {
                if r < s.matrix.nrows() {
                    return s.matrix[(r, c)];
                }
                r -= s.matrix.nrows();
            }
            unreachable!()
        });
        Some(pca_2d(&all)?)
    } else {
        None
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "tag".to_string()];
    header.extend((0..p).map(|i| format!("v{i}")));
    if pcs.is_some() {
        header.extend(["pc0".to_string(), "pc1".to_string()]);
    }
    w.write_record(&header)?;
    let mut row_no = 0;
    for s in sets {
        for (i, id) in s.ids.iter().enumerate() {
            let mut rec = vec![id.clone(), s.tag.clone()];
            rec.extend(s.matrix.row(i).iter().map(|&v| fmt17(v)));
            if let Some(pc) = &pcs {
                rec.push(fmt17(pc[(row_no, 0)]));
                rec.push(fmt17(pc[(row_no, 1)]));
            }
            w.write_record(&rec)?;
            row_no += 1;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an embedding CSV back into one set per tag, in order of first
/// appearance. PCA columns are ignored.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingSet>> {
    let path = path.as_ref();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("id") || header.get(1) != Some("tag") {
        return Err(parse_err(1, "header must start with id,tag".into()));
    }
    let p = header.iter().skip(2).take_while(|h| h.starts_with('v')).count();
    let mut groups: Vec<(String, Vec<String>, Vec<f64>)> = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let tag = rec.get(1).unwrap_or_default().to_string();
        let vals = (0..p)
            .map(|i| {
                rec.get(2 + i)
                    .ok_or_else(|| parse_err(line, "short row".into()))?
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let idx = match groups.iter().position(|g| g.0 == tag) {
            Some(i) => i,
            None => {
                groups.push((tag, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[idx].1.push(rec.get(0).unwrap_or_default().to_string());
        groups[idx].2.extend(vals);
    }
    groups
        .into_iter()
        .map(|(tag, ids, vals)| {
            let m = DMatrix::from_row_slice(ids.len(), p, &vals);
            EmbeddingSet::new(ids, tag, m)
        })
        .collect()
}

/// Disparity and retrieval of text rows against their code partners,
/// before and after a training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n: usize,
    pub disparity_pre: f64,
    pub disparity_post: f64,
    #[serde(rename = "retrieval@1_pre")]
    pub retrieval_at_1_pre: f64,
    #[serde(rename = "retrieval@5_pre")]
    pub retrieval_at_5_pre: f64,
    #[serde(rename = "retrieval@1_post")]
    pub retrieval_at_1_post: f64,
    #[serde(rename = "retrieval@5_post")]
    pub retrieval_at_5_post: f64,
}

/// `(disparity, retrieval@1, retrieval@5)`; `@5` is capped at `n − 1`.
pub fn alignment_stats(text: &DMatrix<f64>, code: &DMatrix<f64>) -> Result<(f64, f64, f64)> {
    let n = text.nrows();
    let disparity = orthogonal_procrustes(code, text, false)?.disparity;
    Ok((disparity, retrieval_accuracy(text, code, 1)?, retrieval_accuracy(text, code, 5.min(n - 1))?))
}

impl AlignmentReport {
    pub fn new(pre: (&DMatrix<f64>, &DMatrix<f64>), post: (&DMatrix<f64>, &DMatrix<f64>)) -> Result<Self> {
        let (d0, a1, a5) = alignment_stats(pre.0, pre.1)?;
        let (d1, b1, b5) = alignment_stats(post.0, post.1)?;
        Ok(AlignmentReport {
            n: pre.0.nrows(),
            disparity_pre: d0,
            disparity_post: d1,
            retrieval_at_1_pre: a1,
            retrieval_at_5_pre: a5,
            retrieval_at_1_post: b1,
            retrieval_at_5_post: b5,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |r, c| ((r * 7 + c * 13) as f64 * 0.37).sin() + 0.1 * c as f64)
    }

    #[test]
    fn identity_and_quarter_turn() {
        let x = sample(20, 2);
        let id = orthogonal_procrustes(&x, &x, false).unwrap();
        assert!(id.disparity < 1e-12);
        assert!((id.rotation.clone() - DMatrix::identity(2, 2)).norm() < 1e-9);
        let r0 = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let y = &x * &r0;
        let fit = orthogonal_procrustes(&x, &y, false).unwrap();
        assert!((fit.rotation - r0).norm() < 1e-9);
        assert!(fit.disparity < 1e-12);
    }

    #[test]
    fn scale_is_recovered() {
        let x = sample(30, 3);
        let y = &x * 2.5;
        let fit = orthogonal_procrustes(&x, &y, true).unwrap();
        assert!((fit.scale - 2.5).abs() < 1e-9);
        assert_eq!(orthogonal_procrustes(&x, &y, false).unwrap().scale, 1.0);
    }

    #[test]
    fn retrieval_bounds() {
        let x = sample(10, 4);
        assert_eq!(retrieval_accuracy(&x, &x, 1).unwrap(), 1.0);
        assert!(retrieval_accuracy(&x, &x, 10).is_err());
        assert!(retrieval_accuracy(&x, &x, 0).is_err());
    }

    #[test]
    fn pca_is_centered() {
        let pc = pca_2d(&sample(15, 5)).unwrap();
        for c in 0..2 {
            assert!(pc.column(c).mean().abs() < 1e-9);
        }
    }
}
