//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded in execution order while they run, so the node
//! list is already a topological order and the backward pass is a single
//! reverse sweep. A node only receives a gradient when at least one of its
//! inputs was created with `requires_grad`; constants and everything derived
//! purely from constants are skipped.

use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::real::{gemm_into, MatView, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Operation kind plus whatever the backward rule needs beyond the
/// input and output values.
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Binary { kind: Binary, a: Var, b: Var },
    Unary { kind: Unary, a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Sum { a: Var, axis: Option<usize> },
    Mean { a: Var, axis: Option<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { a: Var, mask: Arc<Vec<bool>> },
    Reshape { a: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { kind, .. } => match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Relu => "relu",
            },
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn saved_len(&self) -> usize {
        match self {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::Conv2d { cols, .. } => cols.len(),
            _ => 0,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a differentiable computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    checked: bool,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf that requires
/// them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` is not a gradient-carrying leaf or the root does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn nbytes(&self) -> usize {
        self.grads.iter().flatten().map(|g| g.nbytes()).sum()
    }
}

/// Iteration helper for broadcast operands.
enum Index {
    Same,
    Scalar,
    Repeat(usize),
    Map(Vec<usize>),
}

impl Index {
    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            Index::Same => i,
            Index::Scalar => 0,
            Index::Repeat(n) => i % n,
            Index::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NumericsError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
            }
        };
    }
    Ok(out)
}

fn broadcast_index(out: &[usize], input: &[usize]) -> Index {
    let n_out: usize = out.iter().product();
    let n_in: usize = input.iter().product();
    if n_in == n_out {
        return Index::Same;
    }
    if n_in == 1 {
        return Index::Scalar;
    }
    // input is (after dropping leading ones) a trailing block of out
    let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return Index::Repeat(n_in);
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        let j = i as isize - (rank - input.len()) as isize;
        if j >= 0 {
            let d = input[j as usize];
            if d != 1 {
                strides[i] = s;
            }
            s *= d;
        }
    }
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n_out {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Index::Map(map)
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Tape<T> {
    /// New tape in checked mode (non-finite results are errors).
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), checked: true, macs: 0 }
    }

    pub fn with_checked(checked: bool) -> Self {
        Tape { nodes: Vec::new(), checked, macs: 0 }
    }

    /// Multiply-adds performed by forward matrix products and
    /// convolutions so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node outputs and saved intermediates.
    pub fn live_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.value.nbytes() + n.op.saved_len() * std::mem::size_of::<T>())
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::c(value)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- matmul ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product over the last two axes, with optional transposition
    /// of either operand. `a` may carry leading batch axes; `b` is either a
    /// shared 2-D matrix or has the same batch axes as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = MatMulPlan::new(&sa, &sb, ta, tb)?;
        let k = plan.a_size / plan.m.max(1);
        self.macs += (plan.batch * plan.m * plan.n * k) as u64;
        let mut out = vec![T::zero(); plan.batch * plan.m * plan.n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..plan.batch {
                let a_off = bi * plan.a_size;
                let b_off = if plan.b_shared { 0 } else { bi * plan.b_size };
                let c_off = bi * plan.m * plan.n;
                gemm_into(
                    &ad[a_off..a_off + plan.a_size],
                    plan.av,
                    &bd[b_off..b_off + plan.b_size],
                    plan.bv,
                    &mut out[c_off..c_off + plan.m * plan.n],
                    MatView::row_major(plan.m, plan.n, false),
                    false,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(plan.m);
        shape.push(plan.n);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = Op::<T>::Binary { kind, a, b }.name();
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = broadcast_shape(name, &sa, &sb)?;
        let ia = broadcast_index(&shape, &sa);
        let ib = broadcast_index(&shape, &sb);
        let n: usize = shape.iter().product();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<T> = match (&ia, &ib) {
            (Index::Same, Index::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(ad[ia.get(i)], bd[ib.get(i)])).collect(),
        };
        self.push(Tensor::from_parts(shape, out), Op::Binary { kind, a, b }, &[a, b])
    }

    /// Broadcasting addition (numpy rules).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let src = self.value(a);
        let f = |x: T| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        };
        let out = src.map(f);
        self.push(out, Op::Unary { kind, a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    // ---- row-wise normalisations ------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().unwrap();
        let mut out = t.to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_row(row);
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a }, &[a])
    }

    /// Log-softmax over the last axis, evaluated as `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().unwrap();
        let mut out = t.to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { a }, &[a])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let inv_d = T::one() / T::c(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        self.push(
            Tensor::from_parts(xs, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    // ---- convolution -------------------------------------------------------

    /// 2-D cross-correlation: `x` is `[N, C_in, H, W]`, `w` is
    /// `[C_out, C_in, kh, kw]`, `b` is `[C_out]`; zero padding `pad` on all
    /// sides.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(NumericsError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if stride == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be at least 1".into(),
            });
        }
        let (hp, wp) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if hp < ws[2] || wp < ws[3] {
            return Err(NumericsError::InvalidArgument {
                op: "conv2d",
                reason: "kernel larger than padded input".into(),
            });
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (hp - ws[2]) / stride + 1,
            wo: (wp - ws[3]) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        self.macs += (geom.c_out * geom.k() * geom.n * geom.p()) as u64;
        let (k, np) = (geom.k(), geom.n * geom.p());
        let mut y = vec![T::zero(); geom.c_out * np];
        gemm_into(
            self.value(w).data(),
            MatView::row_major(geom.c_out, k, false),
            &cols,
            MatView::row_major(k, np, false),
            &mut y,
            MatView::row_major(geom.c_out, np, false),
            false,
        );
        let bias = self.value(b).data();
        let p = geom.p();
        let mut out = vec![T::zero(); geom.n * geom.c_out * p];
        for co in 0..geom.c_out {
            for n in 0..geom.n {
                let src = &y[co * np + n * p..co * np + (n + 1) * p];
                let dst = &mut out[(n * geom.c_out + co) * p..(n * geom.c_out + co + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias[co];
                }
            }
        }
        let shape = vec![geom.n, geom.c_out, geom.ho, geom.wo];
        self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    // ---- reductions --------------------------------------------------------

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let (out_shape, out) = match axis {
            None => {
                let mut s = t.data().iter().copied().sum::<T>();
                if mean {
                    s /= T::c(t.len() as f64);
                }
                (vec![1], vec![s])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(NumericsError::InvalidArgument {
                        op: "reduce",
                        reason: format!("axis {ax} out of range for rank {}", shape.len()),
                    });
                }
                let (outer, n, inner) = split_axis(&shape, ax);
                let d = t.data();
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        add_into(&mut out[o * inner..(o + 1) * inner], src);
                    }
                }
                if mean {
                    let s = T::one() / T::c(n as f64);
                    out.iter_mut().for_each(|v| *v *= s);
                }
                let mut os = shape.clone();
                os[ax] = 1;
                (os, out)
            }
        };
        let op = if mean { Op::Mean { a, axis } } else { Op::Sum { a, axis } };
        self.push(Tensor::from_parts(out_shape, out), op, &[a])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, true)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), true)
    }

    // ---- structural ----------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => {
                return Err(NumericsError::InvalidArgument {
                    op: "concat",
                    reason: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(NumericsError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs: inputs.to_vec(), axis },
            inputs,
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(NumericsError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} on axis {axis} of {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + width]);
        }
        let mut os = shape;
        os[axis] = end - start;
        self.push(Tensor::from_parts(os, out), Op::Slice { a, axis, start }, &[a])
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(NumericsError::InvalidArgument {
                op: "embedding",
                reason: format!("table must be 2-D, got {ts:?}"),
            });
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::InvalidArgument {
                op: "embedding",
                reason: format!("id {bad} out of range for {v} rows"),
            });
        }
        if ids.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "embedding",
                reason: "no ids".into(),
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Replaces entries where `mask` is true by `value`; those entries get
    /// no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: Arc<Vec<bool>>, value: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let fill = T::c(value);
        let out: Vec<T> = t
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::MaskedFill { a, mask }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        self.push(t, Op::Reshape { a }, &[a])
    }

    // ---- composites ----------------------------------------------------------

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let s = self.scalar(factor);
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Result<Var> {
        let s = self.scalar(value);
        self.add(a, s)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let one = self.scalar(1.0);
        self.sub(one, a)
    }

    /// `sqrt(a) = exp(ln(a) / 2)` for strictly positive `a`.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let l = self.log(a)?;
        let h = self.scale(l, 0.5)?;
        self.exp(h)
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rs = self.shape(root);
        if rs.iter().product::<usize>() != 1 {
            return Err(NumericsError::NonScalarRoot(rs.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.wants(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let plan = MatMulPlan::new(self.shape(*a), self.shape(*b), *ta, *tb)
                    .expect("validated in forward");
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let cv = MatView::row_major(plan.m, plan.n, false);
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · opB^T, written through A's storage layout
                    let ga_view = plan.av;
                    for bi in 0..plan.batch {
                        let b_off = if plan.b_shared { 0 } else { bi * plan.b_size };
                        gemm_into(
                            &g[bi * plan.m * plan.n..(bi + 1) * plan.m * plan.n],
                            cv,
                            &bd[b_off..b_off + plan.b_size],
                            plan.bv.t(),
                            &mut ga[bi * plan.a_size..(bi + 1) * plan.a_size],
                            ga_view,
                            true,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..plan.batch {
                        let b_off = if plan.b_shared { 0 } else { bi * plan.b_size };
                        gemm_into(
                            &ad[bi * plan.a_size..(bi + 1) * plan.a_size],
                            plan.av.t(),
                            &g[bi * plan.m * plan.n..(bi + 1) * plan.m * plan.n],
                            cv,
                            &mut gb[b_off..b_off + plan.b_size],
                            plan.bv,
                            true,
                        );
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let ia = broadcast_index(out_shape, self.shape(*a));
                let ib = broadcast_index(out_shape, self.shape(*b));
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bd[ib.get(i)],
                            Binary::Div => gi / bd[ib.get(i)],
                        };
                        ga[ia.get(i)] += d;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * ad[ia.get(i)],
                            Binary::Div => {
                                let bv = bd[ib.get(i)];
                                -gi * ad[ia.get(i)] / (bv * bv)
                            }
                        };
                        gb[ib.get(i)] += d;
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Exp => y[i],
                            Unary::Log => T::one() / x[i],
                            Unary::Sigmoid => y[i] * (T::one() - y[i]),
                            Unary::Tanh => T::one() - y[i] * y[i],
                            Unary::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..d {
                            dst[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_d = T::one() / T::c(d as f64);
                    for (r, ((gr, hr), dst)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            dst[j] += rstd[r] * (dh - inv_d * s1 - hr[j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (k, p, np) = (geom.k(), geom.p(), geom.n * geom.p());
                // back to [C_out, N·P] layout
                let mut gy = vec![T::zero(); geom.c_out * np];
                for n in 0..geom.n {
                    for co in 0..geom.c_out {
                        let src = &g[(n * geom.c_out + co) * p..(n * geom.c_out + co + 1) * p];
                        gy[co * np + n * p..co * np + (n + 1) * p].copy_from_slice(src);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for co in 0..geom.c_out {
                        gb[co] += gy[co * np..(co + 1) * np].iter().copied().sum::<T>();
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm_into(
                        &gy,
                        MatView::row_major(geom.c_out, np, false),
                        cols,
                        MatView::row_major(k, np, true),
                        gw,
                        MatView::row_major(geom.c_out, k, false),
                        true,
                    );
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); k * np];
                    gemm_into(
                        self.value(*w).data(),
                        MatView::row_major(geom.c_out, k, true),
                        &gy,
                        MatView::row_major(geom.c_out, np, false),
                        &mut gcols,
                        MatView::row_major(k, np, false),
                        false,
                    );
                    let gx = self.acc(grads, *x).unwrap();
                    col2im_add(&gcols, geom, gx);
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let is_mean = matches!(node.op, Op::Mean { .. });
                let shape = self.shape(*a).to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    match axis {
                        None => {
                            let s = if is_mean { g[0] / T::c(ga.len() as f64) } else { g[0] };
                            ga.iter_mut().for_each(|v| *v += s);
                        }
                        Some(ax) => {
                            let (outer, n, inner) = split_axis(&shape, *ax);
                            let f = if is_mean { T::one() / T::c(n as f64) } else { T::one() };
                            for o in 0..outer {
                                let src = &g[o * inner..(o + 1) * inner];
                                for j in 0..n {
                                    let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += *s * f;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let n = self.shape(*v)[*axis];
                    if let Some(gv) = self.acc(grads, *v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut gv[o * n * inner..(o + 1) * n * inner], src);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let width = node.value.shape()[*axis] * inner;
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        add_into(&mut ga[base..base + width], &g[o * width..(o + 1) * width]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, (&gi, &m)) in g.iter().zip(mask.iter()).enumerate() {
                        if !m {
                            ga[i] += gi;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    n: usize,
    a_size: usize,
    b_size: usize,
    b_shared: bool,
    av: MatView,
    bv: MatView,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let av = MatView::row_major(ar, ac, ta);
        let bv = MatView::row_major(br, bc, tb);
        if av.cols != bv.rows {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let b_shared = batch_b.is_empty();
        if !b_shared && batch_a != batch_b {
            return Err(mismatch());
        }
        Ok(MatMulPlan {
            batch: batch_a.iter().product(),
            m: av.rows,
            n: bv.cols,
            a_size: ar * ac,
            b_size: br * bc,
            b_shared,
            av,
            bv,
        })
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let mut cols = vec![T::zero(); k * np];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let img = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst_row[n * p + oy * g.wo + ox] = img[iy * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let p = g.p();
    let np = g.n * p;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let base = (n * g.c_in + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            gx[base + iy * g.w + ix as usize] += src_row[n * p + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
