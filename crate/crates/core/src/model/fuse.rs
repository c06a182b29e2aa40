//! Per-instant gating and the gated fusion block.
//!
//! The gate is a scalar sigmoid over channels at each instant. Fusion
//! concatenates the gate-scaled projections on the channel dim, projects
//! back to d_model with a kernel-1 conv, and optionally adds the level's
//! visual map as a residual.

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Var};

/// x_level [d, T] -> gate values [T] in (0, 1).
///
/// fc_w is a kernel-1 conv weight [1, d, 1], fc_b its bias [1].
pub fn gate<S: Scalar>(g: &mut Graph<S>, x_level: Var, fc_w: Var, fc_b: Var) -> Result<Var> {
    let t = g.shape(x_level)[1];
    let lin = g.conv1d(x_level, fc_w, fc_b, 1, 0)?; // [1, T]
    let flat = g.reshape(lin, vec![t])?;
    g.sigmoid(flat)
}

/// Combines the two cross-modal projections under the gate:
/// conv1d_k1(concat(g * P_x, (1-g) * P_a)) (+ x_level when residual).
///
/// Returns (pre_residual, fused).
pub fn gated_fuse<S: Scalar>(
    g: &mut Graph<S>,
    x_level: Var,
    p_x: Var,
    p_a: Var,
    gate_vals: Var,
    fuse_w: Var,
    fuse_b: Var,
    residual: bool,
) -> Result<(Var, Var)> {
    let gx = g.mul(p_x, gate_vals)?;
    let neg = g.scale(gate_vals, -1.0)?;
    let inv = g.add_scalar(neg, 1.0)?;
    let ga = g.mul(p_a, inv)?;
    let cat = g.concat0(&[gx, ga])?;
    let pre = g.conv1d(cat, fuse_w, fuse_b, 1, 0)?;
    let fused = if residual { g.add(x_level, pre)? } else { pre };
    Ok((pre, fused))
}
