//! Dense-attention reference transformer built directly from graph
//! primitives. It reads the same parameter names as the library encoders
//! but materializes full `[B, H, L, L]` score matrices with an additive mask.

use notecode::nn::Bound;
use notecode::{Graph64, Result, Tensor64, Var};

fn lin(g: &mut Graph64, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{name}.weight"))?)?;
    g.add(y, p.var(&format!("{name}.bias"))?)
}

fn ln(g: &mut Graph64, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let y = g.layer_norm(x, axis, 1e-5)?;
    let y = g.mul(y, p.var(&format!("{name}.gain"))?)?;
    g.add(y, p.var(&format!("{name}.bias"))?)
}

/// `allowed[b][i][j]` marks visible keys.
pub fn dense_attention(g: &mut Graph64, q: Var, k: Var, v: Var, allowed: &[Vec<Vec<bool>>]) -> Result<Var> {
    let s = g.shape(q).to_vec();
    let (b, h, l, dh) = (s[0], s[1], s[2], s[3]);
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let mut mask = Vec::with_capacity(b * h * l * l);
    for bb in 0..b {
        for _ in 0..h {
            for i in 0..l {
                for j in 0..l {
                    mask.push(if allowed[bb][i][j] { 0.0 } else { -1e30 });
                }
            }
        }
    }
    let mask = g.constant(Tensor64::from_vec(vec![b, h, l, l], mask)?);
    let scores = g.add(scores, mask)?;
    let w = g.softmax(scores, 3)?;
    g.matmul(w, v)
}

pub fn transformer(g: &mut Graph64, p: &Bound, prefix: &str, x: Var, layers: usize, heads: usize, allowed: &[Vec<Vec<bool>>]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let mut x = x;
    for layer in 0..layers {
        let n = format!("{prefix}.layer{layer}");
        let h = ln(g, p, &format!("{n}.ln1"), x)?;
        let mut proj = Vec::new();
        for w in ["q", "k", "v"] {
            let y = lin(g, p, &format!("{n}.attn.{w}"), h)?;
            let y = g.reshape(y, &[b, l, heads, dh])?;
            proj.push(g.permute(y, &[0, 2, 1, 3])?);
        }
        let o = dense_attention(g, proj[0], proj[1], proj[2], allowed)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, l, d])?;
        let o = lin(g, p, &format!("{n}.attn.o"), o)?;
        x = g.add(x, o)?;
        let h = ln(g, p, &format!("{n}.ln2"), x)?;
        let f = lin(g, p, &format!("{n}.ff1"), h)?;
        let f = g.gelu(f)?;
        let f = lin(g, p, &format!("{n}.ff2"), f)?;
        x = g.add(x, f)?;
    }
    ln(g, p, &format!("{prefix}.ln_final"), x)
}
