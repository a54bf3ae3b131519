use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::attention::{self, AttentionPattern};
use super::kernels::{self, axis_split, dot, gelu, gelu_grad, gemm, gemm_acc, log_sum_exp, transpose};
use super::Tensor;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Op selector for [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Softmax { axis: usize },
    LayerNorm { axis: usize, eps: f64 },
    Gelu,
    EmbeddingLookup { ids: Vec<usize>, prefix: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Mean { axis: Option<usize> },
    Sum { axis: Option<usize> },
    CrossEntropy { targets: Vec<i64>, ignore_index: i64 },
    CosineSimilarityMatrix,
    L2Normalize,
    Scale(f64),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    Exp {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        a: usize,
        axis: usize,
        inv_std: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Sum {
        a: usize,
        axis: Option<usize>,
    },
    Mean {
        a: usize,
        axis: Option<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<i64>,
        ignore_index: i64,
        probs: Vec<T>,
        count: usize,
    },
    CosineMatrix {
        a: usize,
        b: usize,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    L2Normalize {
        a: usize,
        norms: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        pattern: Arc<AttentionPattern>,
        weights: Vec<T>,
        scale: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } | Op::CosineMatrix { a, b, .. } => {
                vec![*a, *b]
            }
            Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Scale { a, .. }
            | Op::Exp { a }
            | Op::Gelu { a }
            | Op::Softmax { a, .. }
            | Op::LayerNorm { a, .. }
            | Op::Slice { a, .. }
            | Op::Sum { a, .. }
            | Op::Mean { a, .. }
            | Op::L2Normalize { a, .. } => vec![*a],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of one forward computation.
pub struct Graph<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Number of leading repeats when `small` is a trailing suffix of `big`.
fn suffix_repeats(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(big[..big.len() - small.len()].iter().product())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Autograd(format!("variable {v:?} does not belong to graph {}", self.id)));
        }
        Ok(v.index())
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        Ok(&self.nodes[self.idx(v)?])
    }

    fn tracked(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = op.inputs().iter().any(|&i| self.tracked(i));
        let op = if tracked { op } else { Op::Leaf };
        let value = value.with_requires_grad(tracked);
        self.push_raw(value, op)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let idx = u32::try_from(self.nodes.len()).map_err(|_| Error::Autograd("graph too large".into()))?;
        self.nodes.push(Node { value, op });
        Ok(Var { graph: self.id, idx })
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let mut value = value.with_requires_grad(true);
        value.zero_grad();
        self.push_raw(value, Op::Leaf).expect("graph capacity")
    }

    /// Registers a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value.with_requires_grad(false), Op::Leaf).expect("graph capacity")
    }

    /// Registers `value` as a leaf, tracked iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        if value.requires_grad() {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("variable of this graph").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).ok()?.value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Dispatches one of the primitive op kinds by value.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Invalid(format!("{kind:?} takes {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match &kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Softmax { axis } => {
                arity(1)?;
                self.softmax(inputs[0], *axis)
            }
            OpKind::LayerNorm { axis, eps } => {
                arity(1)?;
                self.layer_norm(inputs[0], *axis, *eps)
            }
            OpKind::Gelu => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            OpKind::EmbeddingLookup { ids, prefix } => {
                arity(1)?;
                self.embedding(inputs[0], ids, prefix)
            }
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, end } => {
                arity(1)?;
                self.slice(inputs[0], *axis, *start, *end)
            }
            OpKind::Mean { axis } => {
                arity(1)?;
                self.mean(inputs[0], *axis)
            }
            OpKind::Sum { axis } => {
                arity(1)?;
                self.sum(inputs[0], *axis)
            }
            OpKind::CrossEntropy { targets, ignore_index } => {
                arity(1)?;
                self.cross_entropy(inputs[0], targets, *ignore_index)
            }
            OpKind::CosineSimilarityMatrix => {
                arity(2)?;
                self.cosine_similarity_matrix(inputs[0], inputs[1])
            }
            OpKind::L2Normalize => {
                arity(1)?;
                self.l2_normalize(inputs[0])
            }
            OpKind::Scale(c) => {
                arity(1)?;
                self.scale(inputs[0], *c)
            }
        }
    }

    /// `[..., m, k] · [k, n]` (shared right operand) or `[..., m, k] · [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape().to_vec(), self.nodes[ib].value.shape().to_vec());
        let err = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let out = if shared_rhs {
            gemm(da, db, batch * m, k, n)
        } else {
            let mut out = vec![T::zero(); batch * m * n];
            for p in 0..batch {
                gemm_acc(
                    &da[p * m * k..(p + 1) * m * k],
                    &db[p * k * n..(p + 1) * k * n],
                    &mut out[p * m * n..(p + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            out
        };
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_vec(shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = self.nodes[ia].value.data();
        let mut out = Vec::with_capacity(data.len());
        for block in data.chunks(r * c) {
            out.extend(transpose(block, r, c));
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        self.push("transpose", Tensor::from_vec(shape, out)?, Op::Transpose { a: ia })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { a: ia })
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.shape().to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {perm:?} for shape {s:?}")));
        }
        let out = permute_data(self.nodes[ia].value.data(), &s, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        self.push("permute", Tensor::from_vec(shape, out)?, Op::Permute { a: ia, perm: perm.to_vec() })
    }

    fn broadcast_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if suffix_repeats(va.shape(), vb.shape()).is_none() {
            return Err(Error::shape(name, format!("{:?} with {:?}", va.shape(), vb.shape())));
        }
        let bd = vb.data();
        let out: Vec<T> = va
            .data()
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((ia, ib, Tensor::from_vec(va.shape().to_vec(), out)?))
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a: ia, b: ib })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product; `b` may be a trailing-suffix broadcast of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a: ia, b: ib })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let c = T::lit(c);
        let v = &self.nodes[ia].value;
        let value = Tensor::from_vec(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())?;
        self.push("scale", value, Op::Scale { a: ia, c })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let value = Tensor::from_vec(v.shape().to_vec(), v.data().iter().map(|x| x.exp()).collect())?;
        self.push("exp", value, Op::Exp { a: ia })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let value = Tensor::from_vec(v.shape().to_vec(), v.data().iter().map(|&x| gelu(x)).collect())?;
        self.push("gelu", value, Op::Gelu { a: ia })
    }

    fn check_axis(&self, name: &'static str, i: usize, axis: usize) -> Result<()> {
        let rank = self.nodes[i].value.rank();
        if axis >= rank {
            return Err(Error::shape(name, format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        self.check_axis("softmax", ia, axis)?;
        let v = &self.nodes[ia].value;
        let out = kernels::softmax_axis(v.data(), v.shape(), axis);
        let value = Tensor::from_vec(v.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { a: ia, axis })
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        self.check_axis("layer_norm", ia, axis)?;
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let v = &self.nodes[ia].value;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let x = v.data();
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        let nlen = T::lit(len as f64);
        let eps = T::lit(eps);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mean = T::zero();
                for j in 0..len {
                    mean += x[idx(j)];
                }
                mean /= nlen;
                let mut var = T::zero();
                for j in 0..len {
                    let d = x[idx(j)] - mean;
                    var += d * d;
                }
                var /= nlen;
                let r = T::one() / (var + eps).sqrt();
                for j in 0..len {
                    y[idx(j)] = (x[idx(j)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        let value = Tensor::from_vec(v.shape().to_vec(), y)?;
        self.push("layer_norm", value, Op::LayerNorm { a: ia, axis, inv_std })
    }

    /// Gathers rows of a `[V, d]` table; output shape is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let t = &self.nodes[it].value;
        if t.rank() != 2 {
            return Err(Error::shape("embedding_lookup", format!("table must be rank 2, got {:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding_lookup", format!("{} ids for prefix {prefix:?}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding_lookup", format!("id {bad} outside table of {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::from_vec(shape, out)?;
        self.push("embedding_lookup", value, Op::Embedding { table: it, ids: ids.to_vec() })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let idxs = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        self.check_axis("concat", idxs[0], axis)?;
        let mut total = 0;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idxs {
                let v = &self.nodes[i].value;
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::from_vec(shape, out)?;
        self.push("concat", value, Op::Concat { inputs: idxs, axis })
    }

    /// `a[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        self.check_axis("slice", ia, axis)?;
        let v = &self.nodes[ia].value;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        if start >= end || end > len {
            return Err(Error::shape("slice", format!("range {start}..{end} on axis of length {len}")));
        }
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = end - start;
        let value = Tensor::from_vec(shape, out)?;
        self.push("slice", value, Op::Slice { a: ia, axis, start })
    }

    fn reduce(&self, ia: usize, axis: Option<usize>) -> (Vec<usize>, Vec<T>) {
        let v = &self.nodes[ia].value;
        match axis {
            None => {
                let mut s = T::zero();
                for &x in v.data() {
                    s += x;
                }
                (vec![], vec![s])
            }
            Some(axis) => {
                let (outer, len, inner) = axis_split(v.shape(), axis);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += v.data()[(o * len + j) * inner + i];
                        }
                    }
                }
                let mut shape = v.shape().to_vec();
                shape.remove(axis);
                (shape, out)
            }
        }
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        if let Some(ax) = axis {
            self.check_axis("sum", ia, ax)?;
        }
        let (shape, out) = self.reduce(ia, axis);
        self.push("sum", Tensor::from_vec(shape, out)?, Op::Sum { a: ia, axis })
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        if let Some(ax) = axis {
            self.check_axis("mean", ia, ax)?;
        }
        let count = match axis {
            None => self.nodes[ia].value.numel(),
            Some(ax) => self.nodes[ia].value.shape()[ax],
        };
        let (shape, mut out) = self.reduce(ia, axis);
        let c = T::lit(count as f64);
        out.iter_mut().for_each(|x| *x /= c);
        self.push("mean", Tensor::from_vec(shape, out)?, Op::Mean { a: ia, axis })
    }

    /// Mean cross-entropy of `[N, C]` logits against class targets, skipping
    /// rows whose target equals `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let il = self.idx(logits)?;
        let v = &self.nodes[il].value;
        if v.rank() != 2 || v.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", format!("logits {:?} with {} targets", v.shape(), targets.len())));
        }
        let c = v.shape()[1];
        let mut probs = vec![T::zero(); v.numel()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(Error::shape("cross_entropy", format!("target {t} outside {c} classes")));
            }
            let row = v.row(r);
            let lse = log_sum_exp(row);
            for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            total += lse - row[t as usize];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: every target is ignored".into()));
        }
        let loss = total / T::lit(count as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
        )
    }

    fn row_norms(v: &Tensor<T>) -> Vec<T> {
        let d = *v.shape().last().unwrap_or(&1);
        v.data().chunks(d).map(|r| dot(r, r).sqrt().max(T::lit(1e-12))).collect()
    }

    /// Pairwise cosine similarity of the rows of `[N, p]` and `[M, p]`.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(Error::shape("cosine_similarity_matrix", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let (n, m) = (va.shape()[0], vb.shape()[0]);
        let (norm_a, norm_b) = (Self::row_norms(va), Self::row_norms(vb));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(dot(va.row(i), vb.row(j)) / (norm_a[i] * norm_b[j]));
            }
        }
        let value = Tensor::from_vec(vec![n, m], out)?;
        self.push("cosine_similarity_matrix", value, Op::CosineMatrix { a: ia, b: ib, norm_a, norm_b })
    }

    /// Scales each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.rank() == 0 {
            return Err(Error::shape("l2_normalize", "scalar input"));
        }
        let norms = Self::row_norms(v);
        let d = *v.shape().last().unwrap();
        let out = v.data().chunks(d).zip(&norms).flat_map(|(r, &n)| r.iter().map(move |&x| x / n)).collect();
        let value = Tensor::from_vec(v.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { a: ia, norms })
    }

    /// Scaled dot-product attention restricted to `pattern`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, pattern: Arc<AttentionPattern>, scale: f64) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let scale = T::lit(scale);
        let (vq, vk, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let (out, weights) = attention::forward(vq.data(), vk.data(), vv.data(), vq.shape(), vk.shape(), vv.shape(), &pattern, scale)?;
        let value = Tensor::from_vec(vq.shape().to_vec(), out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                pattern,
                weights,
                scale,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`; adds into the grad buffer of every
    /// tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.idx(loss).map_err(|_| Error::Autograd("loss is detached from this graph".into()))?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        if !self.tracked(il) {
            return Err(Error::Autograd("loss does not depend on any tracked leaf".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; il + 1];
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.tracked(i) {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (input, dg) in self.local_grads(i, &g) {
                if !self.tracked(input) {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (val(*a).data(), val(*b).data());
                if *shared_rhs {
                    let rows = batch * m;
                    let ga = gemm(g, &transpose(db, k, n), rows, n, k);
                    let gb = gemm(&transpose(da, rows, k), g, k, rows, n);
                    vec![(*a, ga), (*b, gb)]
                } else {
                    let mut ga = vec![T::zero(); da.len()];
                    let mut gb = vec![T::zero(); db.len()];
                    for p in 0..*batch {
                        let gp = &g[p * m * n..(p + 1) * m * n];
                        let ap = &da[p * m * k..(p + 1) * m * k];
                        let bp = &db[p * k * n..(p + 1) * k * n];
                        gemm_acc(gp, &transpose(bp, k, n), &mut ga[p * m * k..(p + 1) * m * k], m, n, k);
                        gemm_acc(&transpose(ap, m, k), gp, &mut gb[p * k * n..(p + 1) * k * n], k, m, n);
                    }
                    vec![(*a, ga), (*b, gb)]
                }
            }
            Op::Transpose { a } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut out = Vec::with_capacity(g.len());
                for block in g.chunks(r * c) {
                    out.extend(transpose(block, r, c));
                }
                vec![(*a, out)]
            }
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, permute_data(g, node.value.shape(), &inv))]
            }
            Op::Add { a, b } => {
                let nb = val(*b).numel();
                let mut gb = vec![T::zero(); nb];
                for chunk in g.chunks(nb) {
                    gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul { a, b } => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let nb = db.len();
                let ga: Vec<T> = g.iter().enumerate().map(|(i, &x)| x * db[i % nb]).collect();
                let mut gb = vec![T::zero(); nb];
                for (i, &x) in g.iter().enumerate() {
                    gb[i % nb] += x * da[i];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { a, c } => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::Exp { a } => {
                let y = node.value.data();
                vec![(*a, g.iter().zip(y).map(|(&x, &e)| x * e).collect())]
            }
            Op::Gelu { a } => {
                let x = val(*a).data();
                vec![(*a, g.iter().zip(x).map(|(&d, &x)| d * gelu_grad(x)).collect())]
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += g[idx(j)] * y[idx(j)];
                        }
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm { a, axis, inv_std } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let nlen = T::lit(len as f64);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let (mut mg, mut mgy) = (T::zero(), T::zero());
                        for j in 0..len {
                            mg += g[idx(j)];
                            mgy += g[idx(j)] * y[idx(j)];
                        }
                        mg /= nlen;
                        mgy /= nlen;
                        let r = inv_std[o * inner + i];
                        for j in 0..len {
                            dx[idx(j)] = r * (g[idx(j)] - mg - y[idx(j)] * mgy);
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut gt = vec![T::zero(); t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, &y)| *x += y);
                }
                vec![(*table, gt)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut out: Vec<(usize, Vec<T>)> = inputs.iter().map(|&j| (j, Vec::with_capacity(val(j).numel()))).collect();
                for o in 0..outer {
                    let mut at = o * total * inner;
                    for (j, buf) in out.iter_mut() {
                        let len = val(*j).shape()[*axis] * inner;
                        buf.extend_from_slice(&g[at..at + len]);
                        at += len;
                    }
                }
                out
            }
            Op::Slice { a, axis, start } => {
                let src = val(*a);
                let (outer, len, inner) = axis_split(src.shape(), *axis);
                let width = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); src.numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    gx[dst..dst + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                vec![(*a, gx)]
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let src = val(*a);
                let mean = matches!(node.op, Op::Mean { .. });
                let gx = match axis {
                    None => {
                        let c = if mean { g[0] / T::lit(src.numel() as f64) } else { g[0] };
                        vec![c; src.numel()]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(src.shape(), *ax);
                        let div = if mean { T::lit(len as f64) } else { T::one() };
                        let mut gx = vec![T::zero(); src.numel()];
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    gx[(o * len + j) * inner + i] = g[o * inner + i] / div;
                                }
                            }
                        }
                        gx
                    }
                };
                vec![(*a, gx)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                let c = val(*logits).shape()[1];
                let scale = g[0] / T::lit(*count as f64);
                let mut gx = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_index {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == t as usize { T::one() } else { T::zero() };
                        gx[r * c + j] = (probs[r * c + j] - onehot) * scale;
                    }
                }
                vec![(*logits, gx)]
            }
            Op::CosineMatrix { a, b, norm_a, norm_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (n, p) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[0];
                let s = node.value.data();
                let mut ga = vec![T::zero(); va.numel()];
                let mut gb = vec![T::zero(); vb.numel()];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == T::zero() {
                            continue;
                        }
                        let sij = s[i * m + j];
                        let (ai, bj) = (va.row(i), vb.row(j));
                        let inv = T::one() / (norm_a[i] * norm_b[j]);
                        let ca = sij / (norm_a[i] * norm_a[i]);
                        let cb = sij / (norm_b[j] * norm_b[j]);
                        for q in 0..p {
                            ga[i * p + q] += gij * (bj[q] * inv - ai[q] * ca);
                            gb[j * p + q] += gij * (ai[q] * inv - bj[q] * cb);
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::L2Normalize { a, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let yg = dot(yr, gr);
                    for q in 0..d {
                        gx[r * d + q] = (gr[q] - yr[q] * yg) / nrm;
                    }
                }
                vec![(*a, gx)]
            }
            Op::Attention {
                q,
                k,
                v,
                pattern,
                weights,
                scale,
            } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let (dq, dk, dv) = attention::backward(vq.data(), vk.data(), vv.data(), vq.shape(), pattern, weights, *scale, g);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
        }
    }
}

/// Permutes a row-major array: output axis `i` is input axis `perm[i]`.
fn permute_data<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut counter = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out.push(x[src]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    out
}
