//! Named parameters and the transformer building blocks shared by both
//! encoders.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{AttentionPattern, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Flat map of named parameter tensors. Iteration order is the name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

pub type Grads<T> = BTreeMap<String, Vec<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("parameter {name} already exists")));
        }
        self.params.insert(name, value.with_requires_grad(false));
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn extend_from(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.set(k, v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_where(g, |_| true)
    }

    /// Like [`bind`](Self::bind) but parameters failing `trainable` enter as
    /// constants and receive no gradient.
    pub fn bind_where(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], rng: &mut StreamRng) -> Result<()> {
        self.insert(name, Tensor::randn(shape, INIT_STD, rng))
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::lit(value)))
    }
}

/// Parameter names mapped to their leaves in one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Replaces the leaf bound to `name`.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    /// Gradients of every tracked parameter after `backward`.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Grads<T> {
        self.vars.iter().filter_map(|(k, &v)| g.grad(v).map(|gr| (k.clone(), gr.to_vec()))).collect()
    }
}

/// Adds `src` into `acc` elementwise, creating missing entries.
pub fn accumulate_grads<T: Scalar>(acc: &mut Grads<T>, src: Grads<T>) {
    for (k, g) in src {
        match acc.get_mut(&k) {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

/// Inverted dropout driven by its own stream; a no-op when disabled.
pub struct Dropout {
    rate: f64,
    rng: Option<StreamRng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: StreamRng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else {
            return Ok(x);
        };
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n).map(|_| if rng.random_bool(self.rate) { T::zero() } else { keep }).collect();
        let m = g.constant(Tensor::from_vec(shape, mask)?);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

pub fn init_linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut StreamRng) -> Result<()> {
    store.init_normal(&format!("{name}.weight"), &[d_in, d_out], rng)?;
    store.init_const(&format!("{name}.bias"), &[d_out], 0.0)
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<()> {
    store.init_const(&format!("{name}.gain"), &[d], 1.0)?;
    store.init_const(&format!("{name}.bias"), &[d], 0.0)
}

/// `x · W + b` over the last axis.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{name}.weight"))?)?;
    g.add(y, p.var(&format!("{name}.bias"))?)
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let y = g.layer_norm(x, axis, LN_EPS)?;
    let y = g.mul(y, p.var(&format!("{name}.gain"))?)?;
    g.add(y, p.var(&format!("{name}.bias"))?)
}

pub fn init_transformer<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &TransformerConfig, rng: &mut StreamRng) -> Result<()> {
    let d = cfg.d_model;
    for l in 0..cfg.layers {
        let b = format!("{prefix}.layer{l}");
        init_layer_norm(store, &format!("{b}.ln1"), d)?;
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{b}.attn.{proj}"), d, d, rng)?;
        }
        init_layer_norm(store, &format!("{b}.ln2"), d)?;
        init_linear(store, &format!("{b}.ff1"), d, cfg.d_ff, rng)?;
        init_linear(store, &format!("{b}.ff2"), cfg.d_ff, d, rng)?;
    }
    init_layer_norm(store, &format!("{prefix}.ln_final"), d)
}

fn self_attention<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, pattern: &Arc<AttentionPattern>, cfg: &TransformerConfig) -> Result<Var> {
    let (b, l) = (g.shape(x)[0], g.shape(x)[1]);
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let split = |proj: &str, g: &mut Graph<T>| -> Result<Var> {
        let y = linear(g, p, &format!("{name}.{proj}"), x)?;
        let y = g.reshape(y, &[b, l, h, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split("q", g)?;
    let k = split("k", g)?;
    let v = split("v", g)?;
    let o = g.attention(q, k, v, pattern.clone(), 1.0 / (dh as f64).sqrt())?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, l, cfg.d_model])?;
    linear(g, p, &format!("{name}.o"), o)
}

/// Pre-norm transformer stack over `x: [B, L, d]` followed by a final layer
/// norm. `pattern` selects the keys visible from each query.
pub fn transformer<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    pattern: &Arc<AttentionPattern>,
    cfg: &TransformerConfig,
    drop: &mut Dropout,
) -> Result<Var> {
    let mut x = x;
    for l in 0..cfg.layers {
        let b = format!("{prefix}.layer{l}");
        let h = layer_norm(g, p, &format!("{b}.ln1"), x)?;
        let a = self_attention(g, p, &format!("{b}.attn"), h, pattern, cfg)?;
        let a = drop.apply(g, a)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, p, &format!("{b}.ln2"), x)?;
        let f = linear(g, p, &format!("{b}.ff1"), h)?;
        let f = g.gelu(f)?;
        let f = linear(g, p, &format!("{b}.ff2"), f)?;
        let f = drop.apply(g, f)?;
        x = g.add(x, f)?;
    }
    layer_norm(g, p, &format!("{prefix}.ln_final"), x)
}

/// Hidden state at position 0 of every sequence: `[B, L, d] -> [B, d]`.
pub fn first_token<T: Scalar>(g: &mut Graph<T>, hidden: Var) -> Result<Var> {
    let s = g.shape(hidden).to_vec();
    let c = g.slice(hidden, 1, 0, 1)?;
    g.reshape(c, &[s[0], s[2]])
}

/// Rows of `hidden: [B, L, d]` at flat positions `b * L + i`: `[M, d]`.
pub fn gather_positions<T: Scalar>(g: &mut Graph<T>, hidden: Var, positions: &[usize]) -> Result<Var> {
    let s = g.shape(hidden).to_vec();
    let flat = g.reshape(hidden, &[s[0] * s[1], s[2]])?;
    g.embedding(flat, positions, &[positions.len()])
}

pub fn init_mlm_head<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, vocab: usize, rng: &mut StreamRng) -> Result<()> {
    init_linear(store, &format!("{prefix}.dense"), d, d, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln"), d)?;
    store.init_const(&format!("{prefix}.out_bias"), &[vocab], 0.0)
}

fn mlm_transform<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, hidden: Var, positions: &[usize]) -> Result<Var> {
    let x = gather_positions(g, hidden, positions)?;
    let x = linear(g, p, &format!("{prefix}.dense"), x)?;
    let x = g.gelu(x)?;
    layer_norm(g, p, &format!("{prefix}.ln"), x)
}

/// Vocabulary logits `[M, V]` at the given flat positions; the output matrix
/// is the transposed token embedding table `embedding`.
pub fn mlm_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, embedding: &str, hidden: Var, positions: &[usize]) -> Result<Var> {
    let x = mlm_transform(g, p, prefix, hidden, positions)?;
    let et = g.transpose(p.var(embedding)?)?;
    let logits = g.matmul(x, et)?;
    g.add(logits, p.var(&format!("{prefix}.out_bias"))?)
}

/// Logits restricted to the token ids in `columns`: `[M, columns.len()]`.
pub fn mlm_logits_for<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    embedding: &str,
    hidden: Var,
    positions: &[usize],
    columns: &[usize],
) -> Result<Var> {
    let x = mlm_transform(g, p, prefix, hidden, positions)?;
    let rows = g.embedding(p.var(embedding)?, columns, &[columns.len()])?;
    let rt = g.transpose(rows)?;
    let logits = g.matmul(x, rt)?;
    let bias = p.var(&format!("{prefix}.out_bias"))?;
    let b = g.reshape(bias, &[g.shape(bias)[0], 1])?;
    let b = g.embedding(b, columns, &[columns.len()])?;
    let b = g.reshape(b, &[columns.len()])?;
    g.add(logits, b)
}

/// Mean cross-entropy of MLM logits `[M, V]` against the original ids.
/// Errors when there is nothing to predict.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Train("no masked positions in the batch".into()));
    }
    let t: Vec<i64> = targets.iter().map(|&x| x as i64).collect();
    g.cross_entropy(logits, &t, -1)
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}
