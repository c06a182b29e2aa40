//! Operation recording and reverse-mode differentiation.
//!
//! A [`Graph`] is an arena of executed operations in topological (execution)
//! order. Forward math happens eagerly as ops are recorded; `backward` walks
//! the record once in reverse, so every node's adjoint is visited exactly
//! once and contributions from multiple consumers sum.

use super::ops;
use super::scalar::Scalar;
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

// Some variants carry fields only as part of the recorded-op description
// (Debug output); their adjoints do not need them.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Add,
    Sub,
    Mul,
    Div,
    MinElem,
    MaxElem,
    Scale(f64),
    AddScalar(f64),
    PowScalar(f64),
    Relu,
    Sigmoid,
    Softplus,
    MatMul,
    TransposeLast2,
    Softmax { valid: Option<usize> },
    LayerNorm { eps: f64 },
    Conv1d { stride: usize, pad: usize },
    MaxPool1d { kernel: usize, stride: usize, pad: usize },
    Concat0,
    Slice { dim: usize, start: usize, len: usize },
    Reshape,
    SumAll,
    MeanAll,
    ResampleTime,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::MinElem => "min_elem",
            Op::MaxElem => "max_elem",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::PowScalar(_) => "pow_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::MatMul => "matmul",
            Op::TransposeLast2 => "transpose_last2",
            Op::Softmax { .. } => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "maxpool1d",
            Op::Concat0 => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::ResampleTime => "resample_time",
        }
    }
}

/// Extra forward state some ops save for their adjoint.
#[derive(Debug, Clone)]
enum Aux<S> {
    None,
    Argmax(Vec<u32>),
    LayerNorm { mean: Vec<S>, rstd: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<S>,
    aux: Aux<S>,
}

/// Recorded computation. Single-threaded by contract: record, backward, drop.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    bindings: Vec<(Var, ParamId)>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Adjoint of a node after `backward`; `None` if no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<S>, aux: Aux<S>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a constant leaf. Gradients flow to it but are discarded
    /// unless read back via [`Graph::grad`].
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(Op::Input, vec![], value, Aux::None)
    }

    /// Registers a parameter leaf; its adjoint is written back into the
    /// owning [`ParamSet`] by [`Graph::write_param_grads`].
    pub fn param(&mut self, ps: &ParamSet<S>, id: ParamId) -> Result<Var> {
        let v = self.push(Op::Param(id), vec![], ps.get(id).value.clone(), Aux::None)?;
        self.bindings.push((v, id));
        Ok(v)
    }

    // ── Elementwise binary ops ──────────────────────────────────────────

    /// Checks shapes for an elementwise binary op. Equal shapes, or one
    /// shape being a suffix of the other (leading-dim broadcast), are
    /// allowed; anything else is a loud error.
    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if sa.len() > sb.len() && sa.ends_with(sb) {
            return Ok(sa.to_vec());
        }
        if sb.len() > sa.len() && sb.ends_with(sa) {
            return Ok(sb.to_vec());
        }
        Err(Error::shape(op, sa, sb))
    }

    fn binary<F: Fn(S, S) -> S>(
        &mut self,
        op: Op,
        opname: &'static str,
        a: Var,
        b: Var,
        f: F,
    ) -> Result<Var> {
        let shape = self.binary_shape(opname, a, b)?;
        let da = self.data(a);
        let db = self.data(b);
        let n = shape.iter().product::<usize>();
        let mut out = Vec::with_capacity(n);
        if da.len() == db.len() {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else if da.len() > db.len() {
            let m = db.len();
            out.extend((0..n).map(|i| f(da[i], db[i % m])));
        } else {
            let m = da.len();
            out.extend((0..n).map(|i| f(da[i % m], db[i])));
        }
        self.push(op, vec![a, b], Tensor::new(shape, out)?, Aux::None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "multiply", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, "divide", a, b, |x, y| x / y)
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::MinElem, "min_elem", a, b, |x, y| x.minimum(y))
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::MaxElem, "max_elem", a, b, |x, y| x.maximum(y))
    }

    // ── Elementwise unary ops ───────────────────────────────────────────

    fn unary<F: Fn(S) -> S>(&mut self, op: Op, a: Var, f: F) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(op, vec![a], value, Aux::None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = S::from_f64(c);
        self.unary(Op::Scale(c), a, |x| x * cs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = S::from_f64(c);
        self.unary(Op::AddScalar(c), a, |x| x + cs)
    }

    /// Elementwise x^e for positive x.
    pub fn pow_scalar(&mut self, a: Var, e: f64) -> Result<Var> {
        let es = S::from_f64(e);
        self.unary(Op::PowScalar(e), a, |x| x.powf(es))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| x.maximum(S::ZERO))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, a, super::scalar::sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Softplus, a, super::scalar::softplus)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(Vec<usize>, usize, usize, usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch_ok = batch_a == batch_b || batch_a.is_empty() || batch_b.is_empty();
        if ka != kb || !batch_ok {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch_dims = if batch_a.is_empty() { batch_b } else { batch_a };
        let batch: usize = batch_dims.iter().product();
        let mut out_shape = batch_dims.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok((out_shape, batch, m, ka, n))
    }

    /// Matrix product over the last two dims. Leading dims must match
    /// exactly, or be absent on one side (that side is shared per batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out_shape, batch, m, k, n) = self.matmul_dims(a, b)?;
        let a_per_batch = self.shape(a).len() > 2;
        let b_per_batch = self.shape(b).len() > 2;
        let da = self.data(a);
        let db = self.data(b);
        let mut out = vec![S::ZERO; batch * m * n];
        for bi in 0..batch {
            let ab = if a_per_batch {
                &da[bi * m * k..(bi + 1) * m * k]
            } else {
                da
            };
            let bb = if b_per_batch {
                &db[bi * k * n..(bi + 1) * k * n]
            } else {
                db
            };
            ops::matmul_acc(ab, bb, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        self.push(Op::MatMul, vec![a, b], Tensor::new(out_shape, out)?, Aux::None)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::shape("transpose_last2", &sa, &sa));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let da = self.data(a);
        let mut out = Vec::with_capacity(da.len());
        for bi in 0..batch {
            out.extend(ops::transpose2(&da[bi * r * c..(bi + 1) * r * c], r, c));
        }
        let mut shape = sa.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.push(Op::TransposeLast2, vec![a], Tensor::new(shape, out)?, Aux::None)
    }

    // ── Structured ops ──────────────────────────────────────────────────

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last dim treating columns >= `valid` as -inf
    /// (zero weight, no gradient). Used to mask padded attention keys.
    pub fn softmax_lastdim_masked(&mut self, a: Var, valid: usize) -> Result<Var> {
        self.softmax_impl(a, Some(valid))
    }

    fn softmax_impl(&mut self, a: Var, valid: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("softmax_lastdim", &shape, &shape))?;
        let v = valid.unwrap_or(cols);
        if v == 0 || v > cols {
            return Err(Error::Contract(format!(
                "softmax mask valid={v} out of range for {cols} columns"
            )));
        }
        let rows = self.data(a).len() / cols;
        let out = ops::softmax_rows_fwd(self.data(a), rows, cols, v);
        self.push(
            Op::Softmax { valid },
            vec![a],
            Tensor::new(shape, out)?,
            Aux::None,
        )
    }

    /// Normalizes the last dim to zero mean / unit variance then applies
    /// gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &shape))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.data(x).len() / d;
        let (y, mean, rstd) = ops::layernorm_fwd(
            self.data(x),
            rows,
            d,
            self.data(gamma),
            self.data(beta),
            S::from_f64(eps),
        );
        self.push(
            Op::LayerNorm { eps },
            vec![x, gamma, beta],
            Tensor::new(shape, y)?,
            Aux::LayerNorm { mean, rstd },
        )
    }

    /// 1-D convolution: x [c_in, t], w [c_out, c_in, k], bias [c_out].
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let (c_in, t) = (sx[0], sx[1]);
        let (c_out, w_cin, k) = (sw[0], sw[1], sw[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel must be odd, got {k}")));
        }
        if w_cin != c_in || self.shape(bias) != [c_out] {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        if stride == 0 || pad >= k {
            return Err(Error::Config(format!(
                "conv1d stride {stride} / padding {pad} invalid for kernel {k}"
            )));
        }
        if ops::window_out_len(t, k, stride, pad).unwrap_or(0) == 0 {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (out, t_out) = ops::conv1d_fwd(
            self.data(x),
            c_in,
            t,
            self.data(w),
            c_out,
            k,
            self.data(bias),
            stride,
            pad,
        );
        self.push(
            Op::Conv1d { stride, pad },
            vec![x, w, bias],
            Tensor::new(vec![c_out, t_out], out)?,
            Aux::None,
        )
    }

    /// Channel-wise max pooling of x [c, t]; padding behaves as -inf. The
    /// gradient routes to the argmax element, lowest index on ties.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("maxpool1d", &sx, &sx));
        }
        let (c, t) = (sx[0], sx[1]);
        if stride == 0 || kernel == 0 || pad >= kernel {
            return Err(Error::Config(format!(
                "maxpool1d kernel {kernel} / stride {stride} / padding {pad} invalid"
            )));
        }
        if t == 0 || ops::window_out_len(t, kernel, stride, pad).unwrap_or(0) == 0 {
            return Err(Error::Shape {
                op: "maxpool1d",
                lhs: sx.clone(),
                rhs: sx,
            });
        }
        let (out, t_out, arg) = ops::maxpool1d_fwd(self.data(x), c, t, kernel, stride, pad);
        self.push(
            Op::MaxPool1d { kernel, stride, pad },
            vec![x],
            Tensor::new(vec![c, t_out], out)?,
            Aux::Argmax(arg),
        )
    }

    /// Concatenates along dim 0 (the channel dim for [C, T] feature maps).
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let mut dim0 = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len() || sp[1..] != first[1..] {
                return Err(Error::shape("concat", &first, sp));
            }
            dim0 += sp[0];
        }
        let mut out = Vec::with_capacity(dim0 * first[1..].iter().product::<usize>());
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let mut shape = first;
        shape[0] = dim0;
        self.push(Op::Concat0, parts.to_vec(), Tensor::new(shape, out)?, Aux::None)
    }

    /// Contiguous range `start..start+len` along `dim`.
    pub fn slice(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if dim >= sx.len() || start + len > sx[dim] || len == 0 {
            return Err(Error::Contract(format!(
                "slice dim {dim} range {start}..{} out of bounds for {:?}",
                start + len,
                sx
            )));
        }
        let outer: usize = sx[..dim].iter().product();
        let inner: usize = sx[dim + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sx[dim] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[dim] = len;
        self.push(
            Op::Slice { dim, start, len },
            vec![x],
            Tensor::new(shape, out)?,
            Aux::None,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::Contract(format!(
                "reshape to {:?} changes element count ({} -> {})",
                shape,
                self.data(x).len(),
                numel
            )));
        }
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        self.push(Op::Reshape, vec![x], value, Aux::None)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: S = self.data(x).iter().copied().sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s), Aux::None)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        let s: S = self.data(x).iter().copied().sum();
        let m = s / S::from_f64(n as f64);
        self.push(Op::MeanAll, vec![x], Tensor::scalar(m), Aux::None)
    }

    /// Endpoint-aligned linear resampling of [c, t] along time.
    pub fn resample_time(&mut self, x: Var, t_out: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] == 0 || t_out == 0 {
            return Err(Error::shape("resample_time", &sx, &[t_out]));
        }
        let (c, t_in) = (sx[0], sx[1]);
        let out = ops::resample_time_fwd(self.data(x), c, t_in, t_out);
        self.push(
            Op::ResampleTime,
            vec![x],
            Tensor::new(vec![c, t_out], out)?,
            Aux::None,
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates per-node adjoints; call
    /// [`Graph::write_param_grads`] to accumulate them into parameters.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![S::ONE]);

        for id in (0..=loss.0).rev() {
            let d = match self.grads[id].take() {
                Some(d) => d,
                None => continue,
            };
            self.backprop_node(id, &d)?;
            self.grads[id] = Some(d);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[S]) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gv, &c) in g.iter_mut().zip(contrib) {
                    *gv += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn accumulate_owned(&mut self, v: Var, contrib: Vec<S>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gv, c) in g.iter_mut().zip(contrib) {
                    *gv += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Reduces a full-shape adjoint onto a possibly leading-broadcast
    /// operand of length `target_len`.
    fn reduce_to(&self, d: impl Iterator<Item = S>, full_len: usize, target_len: usize) -> Vec<S> {
        if full_len == target_len {
            return d.collect();
        }
        let mut out = vec![S::ZERO; target_len];
        for (i, v) in d.enumerate() {
            out[i % target_len] += v;
        }
        out
    }

    fn backprop_node(&mut self, id: usize, d: &[S]) -> Result<()> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        match op {
            Op::Input | Op::Param(_) => {}

            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                let (la, lb) = (self.data(a).len(), self.data(b).len());
                let da = self.reduce_to(d.iter().copied(), d.len(), la);
                let db = self.reduce_to(d.iter().copied(), d.len(), lb);
                self.accumulate_owned(a, da);
                self.accumulate_owned(b, db);
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                let (la, lb) = (self.data(a).len(), self.data(b).len());
                let da = self.reduce_to(d.iter().copied(), d.len(), la);
                let db = self.reduce_to(d.iter().map(|&v| -v), d.len(), lb);
                self.accumulate_owned(a, da);
                self.accumulate_owned(b, db);
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (la, lb) = (self.data(a).len(), self.data(b).len());
                let bcast = |data: &[S], i: usize| data[i % data.len()];
                let pa: Vec<S> = {
                    let bd = self.data(b);
                    (0..d.len()).map(|i| d[i] * bcast(bd, i)).collect()
                };
                let pb: Vec<S> = {
                    let ad = self.data(a);
                    (0..d.len()).map(|i| d[i] * bcast(ad, i)).collect()
                };
                let da = self.reduce_to(pa.into_iter(), d.len(), la);
                let db = self.reduce_to(pb.into_iter(), d.len(), lb);
                self.accumulate_owned(a, da);
                self.accumulate_owned(b, db);
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let (la, lb) = (self.data(a).len(), self.data(b).len());
                let bcast = |data: &[S], i: usize| data[i % data.len()];
                let pa: Vec<S> = {
                    let bd = self.data(b);
                    (0..d.len()).map(|i| d[i] / bcast(bd, i)).collect()
                };
                let pb: Vec<S> = {
                    let (ad, bd) = (self.data(a), self.data(b));
                    (0..d.len())
                        .map(|i| {
                            let bv = bcast(bd, i);
                            -d[i] * bcast(ad, i) / (bv * bv)
                        })
                        .collect()
                };
                let da = self.reduce_to(pa.into_iter(), d.len(), la);
                let db = self.reduce_to(pb.into_iter(), d.len(), lb);
                self.accumulate_owned(a, da);
                self.accumulate_owned(b, db);
            }
            Op::MinElem | Op::MaxElem => {
                let (a, b) = (inputs[0], inputs[1]);
                let (la, lb) = (self.data(a).len(), self.data(b).len());
                let take_a: Vec<bool> = {
                    let (ad, bd) = (self.data(a), self.data(b));
                    (0..d.len())
                        .map(|i| {
                            let (x, y) = (ad[i % ad.len()], bd[i % bd.len()]);
                            match op {
                                Op::MinElem => x <= y,
                                _ => x >= y,
                            }
                        })
                        .collect()
                };
                let pa = (0..d.len()).map(|i| if take_a[i] { d[i] } else { S::ZERO });
                let da = self.reduce_to(pa, d.len(), la);
                let pb = (0..d.len()).map(|i| if take_a[i] { S::ZERO } else { d[i] });
                let db = self.reduce_to(pb, d.len(), lb);
                self.accumulate_owned(a, da);
                self.accumulate_owned(b, db);
            }

            Op::Scale(c) => {
                let cs = S::from_f64(c);
                let da: Vec<S> = d.iter().map(|&v| v * cs).collect();
                self.accumulate_owned(inputs[0], da);
            }
            Op::AddScalar(_) => self.accumulate(inputs[0], d),
            Op::PowScalar(e) => {
                let es = S::from_f64(e);
                let da: Vec<S> = {
                    let x = self.data(inputs[0]);
                    d.iter()
                        .zip(x)
                        .map(|(&dv, &xv)| dv * es * xv.powf(es - S::ONE))
                        .collect()
                };
                self.accumulate_owned(inputs[0], da);
            }
            Op::Relu => {
                let da: Vec<S> = {
                    let x = self.data(inputs[0]);
                    d.iter()
                        .zip(x)
                        .map(|(&dv, &xv)| if xv > S::ZERO { dv } else { S::ZERO })
                        .collect()
                };
                self.accumulate_owned(inputs[0], da);
            }
            Op::Sigmoid => {
                let da: Vec<S> = {
                    let y = self.nodes[id].value.data();
                    d.iter()
                        .zip(y)
                        .map(|(&dv, &yv)| dv * yv * (S::ONE - yv))
                        .collect()
                };
                self.accumulate_owned(inputs[0], da);
            }
            Op::Softplus => {
                let da: Vec<S> = {
                    let x = self.data(inputs[0]);
                    d.iter()
                        .zip(x)
                        .map(|(&dv, &xv)| dv * super::scalar::sigmoid(xv))
                        .collect()
                };
                self.accumulate_owned(inputs[0], da);
            }

            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (_, batch, m, k, n) = self.matmul_dims(a, b)?;
                let (la, lb) = (self.data(a).len(), self.data(b).len());
                let a_per_batch = self.shape(a).len() > 2;
                let b_per_batch = self.shape(b).len() > 2;
                let mut da = vec![S::ZERO; la];
                let mut db = vec![S::ZERO; lb];
                {
                    let ad = self.data(a);
                    let bd = self.data(b);
                    for bi in 0..batch {
                        let dslice = &d[bi * m * n..(bi + 1) * m * n];
                        let ab = if a_per_batch {
                            &ad[bi * m * k..(bi + 1) * m * k]
                        } else {
                            ad
                        };
                        let bb = if b_per_batch {
                            &bd[bi * k * n..(bi + 1) * k * n]
                        } else {
                            bd
                        };
                        // dA += dC * B^T
                        let bt = ops::transpose2(bb, k, n);
                        let da_slice = if a_per_batch {
                            &mut da[bi * m * k..(bi + 1) * m * k]
                        } else {
                            &mut da[..]
                        };
                        ops::matmul_acc(dslice, &bt, da_slice, m, n, k);
                        // dB += A^T * dC
                        let at = ops::transpose2(ab, m, k);
                        let db_slice = if b_per_batch {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &mut db[..]
                        };
                        ops::matmul_acc(&at, dslice, db_slice, k, m, n);
                    }
                }
                self.accumulate_owned(a, da);
                self.accumulate_owned(b, db);
            }
            Op::TransposeLast2 => {
                let sy = self.nodes[id].value.shape().to_vec();
                let (r, c) = (sy[sy.len() - 2], sy[sy.len() - 1]);
                let batch: usize = sy[..sy.len() - 2].iter().product();
                let mut da = Vec::with_capacity(d.len());
                for bi in 0..batch {
                    da.extend(ops::transpose2(&d[bi * r * c..(bi + 1) * r * c], r, c));
                }
                self.accumulate_owned(inputs[0], da);
            }

            Op::Softmax { valid } => {
                let y = self.nodes[id].value.data();
                let cols = *self.nodes[id].value.shape().last().unwrap();
                let rows = y.len() / cols;
                let da = ops::softmax_rows_bwd(y, d, rows, cols, valid.unwrap_or(cols));
                self.accumulate_owned(inputs[0], da);
            }
            Op::LayerNorm { .. } => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let dd = self.shape(gamma)[0];
                let rows = self.data(x).len() / dd;
                let (dx, dgamma, dbeta) = match &self.nodes[id].aux {
                    Aux::LayerNorm { mean, rstd } => ops::layernorm_bwd(
                        d,
                        self.data(x),
                        self.data(gamma),
                        mean,
                        rstd,
                        rows,
                        dd,
                    ),
                    _ => unreachable!("layer_norm saves mean/rstd"),
                };
                self.accumulate_owned(x, dx);
                self.accumulate_owned(gamma, dgamma);
                self.accumulate_owned(beta, dbeta);
            }
            Op::Conv1d { stride, pad } => {
                let (x, w, bias) = (inputs[0], inputs[1], inputs[2]);
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let t_out = self.nodes[id].value.shape()[1];
                let (dx, dw, db) = ops::conv1d_bwd(
                    d,
                    self.data(x),
                    self.data(w),
                    sx[0],
                    sx[1],
                    sw[0],
                    sw[2],
                    t_out,
                    stride,
                    pad,
                );
                self.accumulate_owned(x, dx);
                self.accumulate_owned(w, dw);
                self.accumulate_owned(bias, db);
            }
            Op::MaxPool1d { .. } => {
                let x = inputs[0];
                let sx = self.shape(x).to_vec();
                let t_out = self.nodes[id].value.shape()[1];
                let dx = match &self.nodes[id].aux {
                    Aux::Argmax(arg) => ops::maxpool1d_bwd(d, arg, sx[0], sx[1], t_out),
                    _ => unreachable!("maxpool saves argmax"),
                };
                self.accumulate_owned(x, dx);
            }

            Op::Concat0 => {
                let inner: usize = self.nodes[id].value.shape()[1..].iter().product();
                let mut offset = 0;
                for &p in &inputs {
                    let rows = self.shape(p)[0];
                    let part = d[offset..offset + rows * inner].to_vec();
                    offset += rows * inner;
                    self.accumulate_owned(p, part);
                }
            }
            Op::Slice { dim, start, len } => {
                let x = inputs[0];
                let sx = self.shape(x).to_vec();
                let outer: usize = sx[..dim].iter().product();
                let inner: usize = sx[dim + 1..].iter().product();
                let mut da = vec![S::ZERO; self.data(x).len()];
                for o in 0..outer {
                    let dst = (o * sx[dim] + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
                }
                self.accumulate_owned(x, da);
            }
            Op::Reshape => self.accumulate(inputs[0], d),
            Op::SumAll => {
                let n = self.data(inputs[0]).len();
                self.accumulate_owned(inputs[0], vec![d[0]; n]);
            }
            Op::MeanAll => {
                let n = self.data(inputs[0]).len();
                let v = d[0] / S::from_f64(n as f64);
                self.accumulate_owned(inputs[0], vec![v; n]);
            }
            Op::ResampleTime => {
                let x = inputs[0];
                let sx = self.shape(x).to_vec();
                let t_out = self.nodes[id].value.shape()[1];
                let da = ops::resample_time_bwd(d, sx[0], sx[1], t_out);
                self.accumulate_owned(x, da);
            }
        }
        Ok(())
    }

    /// Accumulates adjoints of parameter leaves into the parameter store.
    /// Grads keep accumulating across calls until `ParamSet::zero_grads`.
    pub fn write_param_grads(&self, ps: &mut ParamSet<S>) {
        for &(v, pid) in &self.bindings {
            if let Some(g) = self.grad(v) {
                let p = ps.get_mut(pid);
                for (acc, &gv) in p.grad.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
    }
}
