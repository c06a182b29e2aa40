//! Forward/backward kernels over flat row-major buffers.
//!
//! These are the hot loops; everything above them (graph recording,
//! dispatch) is thin. Inner loops are written over contiguous slices so the
//! compiler can vectorize.

use super::scalar::Scalar;

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C += A * B, all row-major.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Out[cols, rows] = X[rows, cols] transposed.
pub fn transpose2<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Output length of a 1-D sliding window: floor((t + 2*pad - k)/stride) + 1.
pub fn window_out_len(t: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = t + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// 1-D convolution with zero padding.
///
/// x: [c_in, t], w: [c_out, c_in, k], bias: [c_out]; returns [c_out, t_out].
pub fn conv1d_fwd<S: Scalar>(
    x: &[S],
    c_in: usize,
    t: usize,
    w: &[S],
    c_out: usize,
    k: usize,
    bias: &[S],
    stride: usize,
    pad: usize,
) -> (Vec<S>, usize) {
    let t_out = window_out_len(t, k, stride, pad).expect("caller validates geometry");
    let mut out = vec![S::ZERO; c_out * t_out];
    for co in 0..c_out {
        let o = &mut out[co * t_out..(co + 1) * t_out];
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let xr = &x[ci * t..(ci + 1) * t];
            let wr = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            for (j, &wv) in wr.iter().enumerate() {
                if stride == 1 {
                    // out[to] += wv * x[to + j - pad] over the valid band
                    let lo = pad.saturating_sub(j);
                    let hi = (t + pad - j).min(t_out);
                    if lo >= hi {
                        continue;
                    }
                    let src = &xr[lo + j - pad..hi + j - pad];
                    for (ov, &xv) in o[lo..hi].iter_mut().zip(src) {
                        *ov += wv * xv;
                    }
                } else {
                    for to in 0..t_out {
                        let i = to * stride + j;
                        if i >= pad && i - pad < t {
                            o[to] += wv * xr[i - pad];
                        }
                    }
                }
            }
        }
    }
    (out, t_out)
}

/// Gradients of conv1d w.r.t. input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd<S: Scalar>(
    dout: &[S],
    x: &[S],
    w: &[S],
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    t_out: usize,
    stride: usize,
    pad: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dx = vec![S::ZERO; c_in * t];
    let mut dw = vec![S::ZERO; c_out * c_in * k];
    let mut db = vec![S::ZERO; c_out];
    for co in 0..c_out {
        let d = &dout[co * t_out..(co + 1) * t_out];
        db[co] = d.iter().copied().sum();
        for ci in 0..c_in {
            let xr = &x[ci * t..(ci + 1) * t];
            let dxr = &mut dx[ci * t..(ci + 1) * t];
            let wbase = (co * c_in + ci) * k;
            for j in 0..k {
                let wv = w[wbase + j];
                if stride == 1 {
                    let lo = pad.saturating_sub(j);
                    let hi = (t + pad - j).min(t_out);
                    if lo >= hi {
                        continue;
                    }
                    let off = (lo + j) - pad; // first x index touched; lo + j >= pad
                    let mut wgrad = S::ZERO;
                    let dslice = &d[lo..hi];
                    let xslice = &xr[off..off + (hi - lo)];
                    let dxslice = &mut dxr[off..off + (hi - lo)];
                    for ((dv, xv), dxv) in dslice.iter().zip(xslice).zip(dxslice.iter_mut()) {
                        wgrad += *dv * *xv;
                        *dxv += wv * *dv;
                    }
                    dw[wbase + j] += wgrad;
                } else {
                    let mut wgrad = S::ZERO;
                    for to in 0..t_out {
                        let i = to * stride + j;
                        if i >= pad && i - pad < t {
                            wgrad += d[to] * xr[i - pad];
                            dxr[i - pad] += wv * d[to];
                        }
                    }
                    dw[wbase + j] += wgrad;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Channel-wise max pooling with a -inf padding sentinel.
///
/// Returns the pooled map and the flat argmax index (first index wins ties)
/// per output element, used to route gradients.
pub fn maxpool1d_fwd<S: Scalar>(
    x: &[S],
    c: usize,
    t: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<S>, usize, Vec<u32>) {
    let t_out = window_out_len(t, kernel, stride, pad).expect("caller validates geometry");
    let mut out = vec![S::ZERO; c * t_out];
    let mut arg = vec![0u32; c * t_out];
    for ch in 0..c {
        let xr = &x[ch * t..(ch + 1) * t];
        for to in 0..t_out {
            let start = to * stride;
            let mut best = S::neg_infinity();
            let mut best_i = usize::MAX;
            for j in 0..kernel {
                let i = start + j;
                if i >= pad && i - pad < t {
                    let v = xr[i - pad];
                    if best_i == usize::MAX || v > best {
                        best = v;
                        best_i = i - pad;
                    }
                }
            }
            debug_assert!(best_i != usize::MAX, "window entirely in padding");
            out[ch * t_out + to] = best;
            arg[ch * t_out + to] = best_i as u32;
        }
    }
    (out, t_out, arg)
}

pub fn maxpool1d_bwd<S: Scalar>(dout: &[S], arg: &[u32], c: usize, t: usize, t_out: usize) -> Vec<S> {
    let mut dx = vec![S::ZERO; c * t];
    for ch in 0..c {
        for to in 0..t_out {
            let i = arg[ch * t_out + to] as usize;
            dx[ch * t + i] += dout[ch * t_out + to];
        }
    }
    dx
}

/// Row-wise softmax with max subtraction. Columns at index >= valid receive
/// weight 0 (the -inf key mask used for padded attention keys).
pub fn softmax_rows_fwd<S: Scalar>(x: &[S], rows: usize, cols: usize, valid: usize) -> Vec<S> {
    debug_assert!(valid >= 1 && valid <= cols);
    let mut out = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..r * cols + valid];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut mx = xr[0];
        for &v in &xr[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = S::ZERO;
        for (o, &v) in or[..valid].iter_mut().zip(xr) {
            let e = (v - mx).exp();
            *o = e;
            denom += e;
        }
        for o in or[..valid].iter_mut() {
            *o /= denom;
        }
    }
    out
}

pub fn softmax_rows_bwd<S: Scalar>(y: &[S], dy: &[S], rows: usize, cols: usize, valid: usize) -> Vec<S> {
    let mut dx = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        let yr = &y[r * cols..r * cols + valid];
        let dyr = &dy[r * cols..r * cols + valid];
        let dot: S = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        let dxr = &mut dx[r * cols..r * cols + valid];
        for ((d, &yv), &dyv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (dyv - dot);
        }
    }
    dx
}

/// Per-row normalization over the last dimension followed by an affine map.
/// Returns (y, mean, rstd); mean/rstd are saved for the backward pass.
pub fn layernorm_fwd<S: Scalar>(
    x: &[S],
    rows: usize,
    d: usize,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut y = vec![S::ZERO; rows * d];
    let mut means = vec![S::ZERO; rows];
    let mut rstds = vec![S::ZERO; rows];
    let inv_d = S::ONE / S::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean: S = xr.iter().copied().sum::<S>() * inv_d;
        let var: S = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rstd = S::ONE / (var + eps).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        let yr = &mut y[r * d..(r + 1) * d];
        for (((yv, &xv), &g), &b) in yr.iter_mut().zip(xr).zip(gamma).zip(beta) {
            *yv = (xv - mean) * rstd * g + b;
        }
    }
    (y, means, rstds)
}

/// Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn layernorm_bwd<S: Scalar>(
    dy: &[S],
    x: &[S],
    gamma: &[S],
    means: &[S],
    rstds: &[S],
    rows: usize,
    d: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dx = vec![S::ZERO; rows * d];
    let mut dgamma = vec![S::ZERO; d];
    let mut dbeta = vec![S::ZERO; d];
    let inv_d = S::ONE / S::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mean = means[r];
        let rstd = rstds[r];
        let mut m1 = S::ZERO; // mean of gamma*dy
        let mut m2 = S::ZERO; // mean of gamma*dy*xhat
        for i in 0..d {
            let xhat = (xr[i] - mean) * rstd;
            let g = gamma[i] * dyr[i];
            m1 += g;
            m2 += g * xhat;
            dgamma[i] += dyr[i] * xhat;
            dbeta[i] += dyr[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (xr[i] - mean) * rstd;
            dxr[i] = rstd * (gamma[i] * dyr[i] - m1 - xhat * m2);
        }
    }
    (dx, dgamma, dbeta)
}

/// Source coordinate for endpoint-aligned linear resampling. Identity when
/// lengths match; the single-output case takes the sequence midpoint.
fn resample_coord(i: usize, t_in: usize, t_out: usize) -> f64 {
    if t_out <= 1 {
        (t_in as f64 - 1.0) / 2.0
    } else {
        i as f64 * (t_in as f64 - 1.0) / (t_out as f64 - 1.0)
    }
}

/// Linear resampling of [c, t_in] along time to [c, t_out].
pub fn resample_time_fwd<S: Scalar>(x: &[S], c: usize, t_in: usize, t_out: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; c * t_out];
    for i in 0..t_out {
        let src = resample_coord(i, t_in, t_out);
        let i0 = (src.floor() as usize).min(t_in - 1);
        let i1 = (i0 + 1).min(t_in - 1);
        let frac = S::from_f64(src - i0 as f64);
        let w0 = S::ONE - frac;
        for ch in 0..c {
            out[ch * t_out + i] = w0 * x[ch * t_in + i0] + frac * x[ch * t_in + i1];
        }
    }
    out
}

pub fn resample_time_bwd<S: Scalar>(dout: &[S], c: usize, t_in: usize, t_out: usize) -> Vec<S> {
    let mut dx = vec![S::ZERO; c * t_in];
    for i in 0..t_out {
        let src = resample_coord(i, t_in, t_out);
        let i0 = (src.floor() as usize).min(t_in - 1);
        let i1 = (i0 + 1).min(t_in - 1);
        let frac = S::from_f64(src - i0 as f64);
        let w0 = S::ONE - frac;
        for ch in 0..c {
            let d = dout[ch * t_out + i];
            dx[ch * t_in + i0] += w0 * d;
            dx[ch * t_in + i1] += frac * d;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // [[1,0],[0,1]] * [[3,4],[5,6]] = [[3,4],[5,6]]
        let a = [1.0f64, 0.0, 0.0, 1.0];
        let b = [3.0, 4.0, 5.0, 6.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let a = [1.0f64, 2.0];
        let b = [3.0, 4.0];
        assert_eq!(matmul(&a, &b, 1, 2, 1), vec![11.0]);
    }

    #[test]
    fn conv1d_hand_case() {
        // x=[1,2,3,4], w=[1,1,1], pad 1, stride 1 -> [3,6,9,7]
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let w = [1.0, 1.0, 1.0];
        let (y, t_out) = conv1d_fwd(&x, 1, 4, &w, 1, 3, &[0.0], 1, 1);
        assert_eq!(t_out, 4);
        assert_eq!(y, vec![3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = [5.0f64, -1.0, 2.0];
        let (y, _) = conv1d_fwd(&x, 1, 3, &[1.0], 1, 1, &[0.0], 1, 0);
        assert_eq!(y, vec![5.0, -1.0, 2.0]);
    }

    #[test]
    fn maxpool_hand_case() {
        // [1,3,2,5,4,0,7,1], kernel 3, stride 2, pad 1 -> [3,5,5,7]
        let x = [1.0f64, 3.0, 2.0, 5.0, 4.0, 0.0, 7.0, 1.0];
        let (y, t_out, _) = maxpool1d_fwd(&x, 1, 8, 3, 2, 1);
        assert_eq!(t_out, 4);
        assert_eq!(y, vec![3.0, 5.0, 5.0, 7.0]);
    }

    #[test]
    fn maxpool_length_formula() {
        // T=256, kernel 3 / stride 2 / pad 1 -> 128
        assert_eq!(window_out_len(256, 3, 2, 1), Some(128));
    }

    #[test]
    fn maxpool_tie_routes_to_first_index() {
        let x = [2.0f64, 2.0];
        let (_, t_out, arg) = maxpool1d_fwd(&x, 1, 2, 2, 2, 0);
        assert_eq!(t_out, 1);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let y = softmax_rows_fwd(&[0.0f64, 0.0], 1, 2, 2);
        assert_eq!(y, vec![0.5, 0.5]);
        let y = softmax_rows_fwd(&[1000.0f64, 1000.0, 1000.0], 1, 3, 3);
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] -> [0.25, 0.75]
        let y = softmax_rows_fwd(&[0.0f64, 3.0f64.ln()], 1, 2, 2);
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layernorm_closed_form() {
        // gamma=1, beta=0, x=[-1,1] stays [-1,1] up to eps
        let (y, _, _) = layernorm_fwd(&[-1.0f64, 1.0], 1, 2, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        assert!((y[0] + 1.0).abs() < 1e-4);
        assert!((y[1] - 1.0).abs() < 1e-4);
        // constant row maps to beta
        let (y, _, _) = layernorm_fwd(&[2.0f64, 2.0], 1, 2, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn resample_identity_when_lengths_match() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(resample_time_fwd(&x, 2, 3, 3), x.to_vec());
    }
}
