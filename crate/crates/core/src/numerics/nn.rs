//! Transformer building blocks expressed on the tape.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::param::{Bindings, Init, ParamSpec};
use super::tensor::{c, Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Projection matrices of one attention layer, each `[D, D]`, applied as
/// `x . W` on row vectors.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttentionWeights {
    pub fn specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
        ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|w| ParamSpec::weight(format!("{prefix}.{w}"), dim, dim))
            .collect()
    }

    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: b.get(&format!("{prefix}.wq"))?,
            wk: b.get(&format!("{prefix}.wk"))?,
            wv: b.get(&format!("{prefix}.wv"))?,
            wo: b.get(&format!("{prefix}.wo"))?,
        })
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[.., S_q, D]`, `k` and `v` are `[.., S_k, D]` with identical
/// leading dims. `mask`, when given, is added to the `[S_q, S_k]` score
/// matrix of every head before the softmax.
pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionWeights,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() < 2 || ks.len() < 2 || g.shape(v) != ks.as_slice() {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d = qs[qs.len() - 1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "feature dim {d} not divisible by {heads} heads"
        )));
    }
    if ks[ks.len() - 1] != d || qs[..qs.len() - 2] != ks[..ks.len() - 2] {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let lead = qs[..qs.len() - 2].to_vec();
    let batch: usize = lead.iter().product();
    let (sq, sk) = (qs[qs.len() - 2], ks[ks.len() - 2]);
    let dh = d / heads;

    let qp = g.matmul(q, w.wq)?;
    let kp = g.matmul(k, w.wk)?;
    let vp = g.matmul(v, w.wv)?;
    let qh = split_heads(g, qp, batch, sq, heads, dh)?;
    let kh = split_heads(g, kp, batch, sk, heads, dh)?;
    let vh = split_heads(g, vp, batch, sk, heads, dh)?;

    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let mut scores = g.scale(scores, c(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        scores = g.add_broadcast(scores, m)?;
    }
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, vh)?; // [B*h, S_q, dh]
    let ctx = g.reshape(ctx, &[batch, heads, sq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let mut out_shape = lead;
    out_shape.extend([sq, d]);
    let ctx = g.reshape(ctx, &out_shape)?;
    g.matmul(ctx, w.wo)
}

fn split_heads<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
) -> Result<Var> {
    let x = g.reshape(x, &[batch, seq, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, seq, dh])
}

/// Additive causal mask `[S, S]`: 0 on and below the diagonal, a large
/// negative number above it.
pub fn causal_mask<T: Element>(g: &mut Graph<T>, len: usize) -> Var {
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = c(-1e9);
        }
    }
    g.constant(Tensor::new(vec![len, len], data).expect("square mask"))
}

pub fn layer_norm_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), vec![dim], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), vec![dim], Init::Zeros),
    ]
}

pub fn layer_norm<T: Element>(g: &mut Graph<T>, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.get(&format!("{prefix}.gamma"))?;
    let beta = b.get(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Vec<ParamSpec> {
    let mut specs = vec![ParamSpec::weight(
        format!("{prefix}.weight"),
        fan_in,
        fan_out,
    )];
    if bias {
        specs.push(ParamSpec::new(
            format!("{prefix}.bias"),
            vec![fan_out],
            Init::Uniform { fan_in },
        ));
    }
    specs
}

pub fn linear<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    prefix: &str,
    x: Var,
    bias: bool,
) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let y = g.matmul(x, w)?;
    if bias {
        let bv = b.get(&format!("{prefix}.bias"))?;
        g.add_broadcast(y, bv)
    } else {
        Ok(y)
    }
}

pub fn mlp_specs(prefix: &str, dim: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut specs = linear_specs(&format!("{prefix}.fc1"), dim, hidden, true);
    specs.extend(linear_specs(&format!("{prefix}.fc2"), hidden, dim, true));
    specs
}

/// Two-layer GELU MLP.
pub fn mlp<T: Element>(g: &mut Graph<T>, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, b, &format!("{prefix}.fc1"), x, true)?;
    let h = g.gelu(h);
    linear(g, b, &format!("{prefix}.fc2"), h, true)
}
