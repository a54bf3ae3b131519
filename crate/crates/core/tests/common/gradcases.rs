//! Seeded gradient-check programs, one family per differentiable op.

use std::sync::Arc;

use notecode::tensor::AttentionPattern;
use notecode::{Graph64, Result, Tensor64, Var};
use rand::Rng;

pub type Program = Box<dyn Fn(&mut Graph64, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub program: Program,
    pub inputs: Vec<Tensor64>,
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::randn(shape, 1.0, rng)
}

/// Reduces `y` to a scalar through a fixed random projection so that every
/// output coordinate influences the loss with a distinct weight.
fn project(g: &mut Graph64, y: Var, seed: u64) -> Result<Var> {
    let mut r = super::rng(seed ^ 0xA5A5);
    let w = Tensor64::randn(g.shape(y), 1.0, &mut r);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

fn dims(rng: &mut impl Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(2..6), rng.random_range(1..5))
}

pub fn cases(seeds: std::ops::Range<u64>) -> Vec<Case> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut r = super::rng(seed);
        let (m, k, n) = dims(&mut r);
        let s = seed;
        let mut push = |name: &str, program: Program, inputs: Vec<Tensor64>| {
            out.push(Case {
                name: format!("{name}#{seed}"),
                program,
                inputs,
            })
        };

        push(
            "matmul",
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[k, n])],
        );
        push(
            "matmul_batched",
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[2, m, k]), randn(&mut r, &[2, k, n])],
        );
        push(
            "add_broadcast",
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.mul(y, y)?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[k])],
        );
        push(
            "mul_broadcast",
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[k])],
        );
        let axis = (seed % 2) as usize;
        push(
            "softmax",
            Box::new(move |g, v| {
                let y = g.softmax(v[0], axis)?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m + 1, k])],
        );
        push(
            "layer_norm",
            Box::new(move |g, v| {
                let y = g.layer_norm(v[0], axis, 1e-5)?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[k, k + 1])],
        );
        push(
            "gelu",
            Box::new(move |g, v| {
                let y = g.gelu(v[0])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k])],
        );
        let vocab = k + 2;
        let ids: Vec<usize> = (0..m * 2).map(|_| r.random_range(0..vocab)).collect();
        push(
            "embedding_lookup",
            Box::new(move |g, v| {
                let y = g.embedding(v[0], &ids, &[m, 2])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[vocab, n])],
        );
        push(
            "concat",
            Box::new(move |g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[m, n])],
        );
        push(
            "slice",
            Box::new(move |g, v| {
                let y = g.slice(v[0], 1, 1, k)?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k])],
        );
        push(
            "mean_axis",
            Box::new(move |g, v| {
                let y = g.mean(v[0], Some(axis))?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k])],
        );
        push(
            "sum_all",
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y, None)
            }),
            vec![randn(&mut r, &[m, k])],
        );
        let classes = k + 1;
        let targets: Vec<i64> = (0..m + 1)
            .map(|i| if i == 0 && m > 1 { -100 } else { r.random_range(0..classes) as i64 })
            .collect();
        push(
            "cross_entropy",
            Box::new(move |g, v| g.cross_entropy(v[0], &targets, -100)),
            vec![randn(&mut r, &[m + 1, classes])],
        );
        push(
            "cosine_similarity_matrix",
            Box::new(move |g, v| {
                let y = g.cosine_similarity_matrix(v[0], v[1])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[n + 1, k])],
        );
        push(
            "l2_normalize",
            Box::new(move |g, v| {
                let y = g.l2_normalize(v[0])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k])],
        );
        push(
            "scale",
            Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k])],
        );
        push(
            "exp",
            Box::new(move |g, v| {
                let y = g.exp(v[0])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k])],
        );
        push(
            "transpose_permute_reshape",
            Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                let y = g.permute(y, &[1, 0, 2])?;
                let shape = g.shape(y).to_vec();
                let y = g.reshape(y, &[shape.iter().product()])?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[2, m, k])],
        );
        let len = k + 2;
        let window = 1 + (seed as usize % 2);
        let pattern = Arc::new(AttentionPattern::from_fn(2, len, move |b, i, j| {
            let valid = !(b == 1 && j == len - 1);
            valid && (i.abs_diff(j) <= window || i == 0 || j == 0)
        }));
        push(
            "attention",
            Box::new(move |g, v| {
                let y = g.attention(v[0], v[1], v[2], pattern.clone(), 0.5)?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[2, 2, len, 3]), randn(&mut r, &[2, 2, len, 3]), randn(&mut r, &[2, 2, len, 3])],
        );
        push(
            "composite_matmul_gelu_mean",
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.gelu(y)?;
                g.mean(y, None)
            }),
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[k, n])],
        );
        push(
            "layer_norm_of_matmul",
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.layer_norm(y, 1, 1e-5)?;
                project(g, y, s)
            }),
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[k, n + 1])],
        );
    }
    out
}
