//! Multi-head scaled dot-product cross-attention.
//!
//! Queries come from one modality, keys and values from the other. Scores
//! are scaled by sqrt(d_model/H) and softmax-normalized over keys; heads
//! are concatenated on the channel dim and output-projected. No positional
//! encoding is applied anywhere, so the block is equivariant to context
//! permutations.

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamSet, Scalar, Var};

/// Parameter handles for one attention direction at one level.
#[derive(Debug, Clone)]
pub struct AttnParams {
    /// Per-head [d, d/H] query/key/value projections.
    pub q: Vec<ParamId>,
    pub k: Vec<ParamId>,
    pub v: Vec<ParamId>,
    /// Output projection conv (kernel 1): [d, d, 1] + [d].
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// query_feat [d, T_q], ctx_feat [d, T_k] -> [d, T_q].
///
/// Keys at index >= key_valid are masked out of the softmax.
pub fn cross_attention<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamSet<S>,
    cache: &mut super::ParamCache,
    attn: &AttnParams,
    query_feat: Var,
    ctx_feat: Var,
    key_valid: usize,
) -> Result<Var> {
    let heads = attn.q.len();
    let d_model = g.shape(query_feat)[0];
    let head_dim = d_model / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q_t = g.transpose_last2(query_feat)?; // [T_q, d]
    let k_t = g.transpose_last2(ctx_feat)?; // [T_k, d]

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = cache.var(g, ps, attn.q[h])?;
        let wk = cache.var(g, ps, attn.k[h])?;
        let wv = cache.var(g, ps, attn.v[h])?;
        let q = g.matmul(q_t, wq)?; // [T_q, dh]
        let k = g.matmul(k_t, wk)?; // [T_k, dh]
        let v = g.matmul(k_t, wv)?; // [T_k, dh]
        let k_tt = g.transpose_last2(k)?; // [dh, T_k]
        let scores = g.matmul(q, k_tt)?; // [T_q, T_k]
        let scaled = g.scale(scores, scale)?;
        let weights = g.softmax_lastdim_masked(scaled, key_valid)?;
        let att = g.matmul(weights, v)?; // [T_q, dh]
        head_outs.push(g.transpose_last2(att)?); // [dh, T_q]
    }
    let cat = g.concat0(&head_outs)?; // [d, T_q]
    let out_w = cache.var(g, ps, attn.out_w)?;
    let out_b = cache.var(g, ps, attn.out_b)?;
    g.conv1d(cat, out_w, out_b, 1, 0)
}
