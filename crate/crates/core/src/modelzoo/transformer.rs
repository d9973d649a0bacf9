use super::layers::{Builder, Layer, LayerKind};
use crate::error::Result;
use crate::{Graph, ParamStore, Tensor, Var};

/// Additive mask value for disallowed attention scores.
pub const MASK_NEG: f64 = -1e9;

/// Layer indices of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    pub norm1: usize,
    pub qkv: usize,
    pub out: usize,
    pub norm2: usize,
    pub fc1: usize,
    pub fc2: usize,
}

pub(crate) fn build_block(b: &mut Builder, prefix: &str, dim: usize, mlp: usize) -> Block {
    Block {
        norm1: b.layer_norm(&format!("{prefix}.norm1"), dim),
        qkv: b.linear(&format!("{prefix}.attn.qkv"), LayerKind::AttentionQkv, dim, 3 * dim, true),
        out: b.linear(&format!("{prefix}.attn.out"), LayerKind::AttentionOut, dim, dim, true),
        norm2: b.layer_norm(&format!("{prefix}.norm2"), dim),
        fc1: b.linear(&format!("{prefix}.mlp.fc1"), LayerKind::FullyConnected, dim, mlp, true),
        fc2: b.linear(&format!("{prefix}.mlp.fc2"), LayerKind::FullyConnected, mlp, dim, true),
    }
}

pub(crate) struct Ctx<'a> {
    pub layers: &'a [Layer],
    pub params: &'a ParamStore,
}

/// Key-padding mask `[B·H, T, T]` for per-sample valid lengths.
pub fn padding_mask(lengths: &[usize], heads: usize, t: usize) -> Tensor {
    let mut m = vec![0.0; lengths.len() * heads * t * t];
    for (b, &len) in lengths.iter().enumerate() {
        for h in 0..heads {
            let base = (b * heads + h) * t * t;
            for i in 0..t {
                for j in len..t {
                    m[base + i * t + j] = MASK_NEG;
                }
            }
        }
    }
    Tensor::new(vec![lengths.len() * heads, t, t], m).expect("mask shape")
}

/// Causal mask `[B·H, T, T]`: position `i` sees `j ≤ i`.
pub fn causal_mask(batch: usize, heads: usize, t: usize) -> Tensor {
    let mut m = vec![0.0; batch * heads * t * t];
    for bh in 0..batch * heads {
        for i in 0..t {
            for j in i + 1..t {
                m[(bh * t + i) * t + j] = MASK_NEG;
            }
        }
    }
    Tensor::new(vec![batch * heads, t, t], m).expect("mask shape")
}

/// Multi-head self-attention over `x [B, T, d]` with a combined qkv
/// projection.
pub(crate) fn attention(ctx: &Ctx, g: &mut Graph, blk: &Block, x: Var, heads: usize, mask: Option<&Tensor>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qkv = ctx.layers[blk.qkv].linear(g, ctx.params, x)?;
    let qkv = g.reshape(qkv, &[b, t, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, b * heads, t, dh])?;
    let q = g.select(qkv, 0, 0)?;
    let k = g.select(qkv, 0, 1)?;
    let v = g.select(qkv, 0, 2)?;
    let scores = g.bmm(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add_const(scores, m)?;
    }
    let att = g.softmax(scores)?;
    let y = g.bmm(att, v, false)?;
    let y = g.reshape(y, &[b, heads, t, dh])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    let y = g.reshape(y, &[b, t, d])?;
    ctx.layers[blk.out].linear(g, ctx.params, y)
}

pub(crate) fn block(ctx: &Ctx, g: &mut Graph, blk: &Block, x: Var, heads: usize, mask: Option<&Tensor>, dropout: f64) -> Result<Var> {
    let h = ctx.layers[blk.norm1].norm(g, ctx.params, &[], x)?;
    let h = attention(ctx, g, blk, h, heads, mask)?;
    let h = g.dropout(h, dropout)?;
    let x = g.add(x, h)?;
    let h = ctx.layers[blk.norm2].norm(g, ctx.params, &[], x)?;
    let h = ctx.layers[blk.fc1].linear(g, ctx.params, h)?;
    let h = g.gelu(h)?;
    let h = ctx.layers[blk.fc2].linear(g, ctx.params, h)?;
    let h = g.dropout(h, dropout)?;
    g.add(x, h)
}
