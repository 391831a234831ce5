//! Flat-tape reverse-mode gradient engine.
//!
//! Every differentiable operation appends one node to a linear tape; the
//! backward pass walks the tape in exact reverse order, so gradients are
//! deterministic for a fixed op sequence. A tape is confined to one thread
//! and rebuilt per training step.
//!
//! Every operation validates its output for NaN/Inf and fails loudly
//! instead of propagating poison values.

use crate::error::{FeatherError, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    /// Input or parameter; gradient is accumulated and kept.
    Leaf,
    /// Non-differentiable constant.
    Constant,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    /// `[R x C] + [C]` row-broadcast bias.
    AddBias(ValueId, ValueId),
    /// Multiply by a compile-time-known constant factor.
    Scale(ValueId, F),
    Exp(ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    Softplus(ValueId),
    Abs(ValueId),
    Softmax(ValueId),
    /// `[M x K] * [K x N]`
    MatMul(ValueId, ValueId),
    /// `[M x N] * [N] -> [M]`
    MatVec(ValueId, ValueId),
    /// `[M] * [M x N] -> [N]`
    VecMat(ValueId, ValueId),
    /// 1-D concatenation.
    Concat(Vec<ValueId>),
    /// 1-D slice.
    Slice {
        input: ValueId,
        start: usize,
        len: usize,
    },
    /// Row of a 2-D tensor as a 1-D vector.
    Row { input: ValueId, index: usize },
    /// Stack n equal-length vectors into an `[n x C]` matrix.
    StackRows(Vec<ValueId>),
    /// Gather rows of an embedding table by id.
    Embedding { table: ValueId, ids: Vec<usize> },
    /// Sum of all elements, shape [1].
    SumAll(ValueId),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient buffer for a value, if any path from the loss reached it.
    pub fn get(&self, id: ValueId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Record a trainable or input leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> ValueId {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<F>) -> ValueId {
        self.push_unchecked(value, Op::Constant)
    }

    pub fn scalar_const(&mut self, value: F) -> ValueId {
        self.constant(Tensor::scalar(value))
    }

    fn push_unchecked(&mut self, value: Tensor<F>, op: Op<F>) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    fn push(&mut self, opname: &'static str, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Result<ValueId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(FeatherError::NonFinite { op: opname });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Ok(self.push_unchecked(Tensor::new(shape, data)?, op))
    }

    // ── elementwise binary ops (same shape, or scalar on either side) ──

    fn broadcast_shape(
        &self,
        opname: &'static str,
        a: ValueId,
        b: ValueId,
    ) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else if tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else {
            Err(FeatherError::DimensionMismatch {
                op: opname,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        opname: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<ValueId> {
        let shape = self.broadcast_shape(opname, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<F> = if ta.shape() == tb.shape() {
            ta.iter().zip(tb.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            tb.iter().map(|&y| f(s, y)).collect()
        } else {
            let s = tb.data()[0];
            ta.iter().map(|&x| f(x, s)).collect()
        };
        self.push(opname, shape, data, op)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `[R x C] + [C]`: add a bias vector to every row.
    pub fn add_bias(&mut self, m: ValueId, bias: ValueId) -> Result<ValueId> {
        let (tm, tb) = (self.value(m), self.value(bias));
        if tm.shape().len() != 2 || tb.shape().len() != 1 || tm.cols() != tb.shape()[0] {
            return Err(FeatherError::DimensionMismatch {
                op: "add_bias",
                lhs: tm.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (rows, cols) = (tm.rows(), tm.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(tm.at2(r, c) + tb.data()[c]);
            }
        }
        self.push("add_bias", vec![rows, cols], data, Op::AddBias(m, bias))
    }

    pub fn scale(&mut self, a: ValueId, factor: F) -> Result<ValueId> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let data = ta.iter().map(|&x| x * factor).collect();
        self.push("scale", shape, data, Op::Scale(a, factor))
    }

    // ── elementwise unary ops ──

    fn unary(
        &mut self,
        opname: &'static str,
        a: ValueId,
        f: impl Fn(F) -> F,
        op: Op<F>,
    ) -> Result<ValueId> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let data = ta.iter().map(|&x| f(x)).collect();
        self.push(opname, shape, data, op)
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary("sigmoid", a, scalar::sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary("softplus", a, scalar::softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    /// Max-subtracted softmax. 1-D tensors use axis 0; 2-D tensors support
    /// axis 1 (each row sums to 1).
    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let mut data = ta.data().to_vec();
        match (shape.len(), axis) {
            (1, 0) => scalar::softmax_in_place(&mut data),
            (2, 1) => {
                let cols = shape[1];
                for row in data.chunks_mut(cols) {
                    scalar::softmax_in_place(row);
                }
            }
            _ => {
                return Err(FeatherError::Contract(format!(
                    "softmax: unsupported axis {axis} for shape {shape:?}"
                )))
            }
        }
        self.push("softmax", shape, data, Op::Softmax(a))
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(FeatherError::DimensionMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.at2(i, p);
                let brow = tb.row(p);
                let out = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] = out[j] + aip * brow[j];
                }
            }
        }
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    /// `[M x N] * [N] -> [M]`, the orientation used by all model kernels.
    pub fn matvec(&mut self, m: ValueId, v: ValueId) -> Result<ValueId> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.shape().len() != 2 || tv.shape().len() != 1 || tm.cols() != tv.shape()[0] {
            return Err(FeatherError::DimensionMismatch {
                op: "matvec",
                lhs: tm.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let rows = tm.rows();
        let vs = tv.data();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = F::zero();
            for (w, x) in tm.row(r).iter().zip(vs.iter()) {
                acc = acc + *w * *x;
            }
            data.push(acc);
        }
        self.push("matvec", vec![rows], data, Op::MatVec(m, v))
    }

    /// `[M] * [M x N] -> [N]`: weighted sum of matrix rows.
    pub fn vecmat(&mut self, v: ValueId, m: ValueId) -> Result<ValueId> {
        let (tv, tm) = (self.value(v), self.value(m));
        if tv.shape().len() != 1 || tm.shape().len() != 2 || tv.shape()[0] != tm.rows() {
            return Err(FeatherError::DimensionMismatch {
                op: "vecmat",
                lhs: tv.shape().to_vec(),
                rhs: tm.shape().to_vec(),
            });
        }
        let (rows, cols) = (tm.rows(), tm.cols());
        let mut data = vec![F::zero(); cols];
        for j in 0..rows {
            let w = tv.data()[j];
            let mrow = tm.row(j);
            for c in 0..cols {
                data[c] = data[c] + w * mrow[c];
            }
        }
        self.push("vecmat", vec![cols], data, Op::VecMat(v, m))
    }

    // ── structural ops ──

    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(FeatherError::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 1 {
                return Err(FeatherError::Contract(
                    "concat supports 1-D tensors only".into(),
                ));
            }
            data.extend_from_slice(tp.data());
        }
        let len = data.len();
        self.push("concat", vec![len], data, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, input: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let ti = self.value(input);
        if ti.shape().len() != 1 || start + len > ti.numel() {
            return Err(FeatherError::Contract(format!(
                "slice [{start}..{}] out of range for shape {:?}",
                start + len,
                ti.shape()
            )));
        }
        let data = ti.data()[start..start + len].to_vec();
        self.push("slice", vec![len], data, Op::Slice { input, start, len })
    }

    pub fn row(&mut self, input: ValueId, index: usize) -> Result<ValueId> {
        let ti = self.value(input);
        if ti.shape().len() != 2 || index >= ti.rows() {
            return Err(FeatherError::Contract(format!(
                "row {index} out of range for shape {:?}",
                ti.shape()
            )));
        }
        let data = ti.row(index).to_vec();
        let cols = ti.cols();
        self.push("row", vec![cols], data, Op::Row { input, index })
    }

    pub fn stack_rows(&mut self, rows: &[ValueId]) -> Result<ValueId> {
        if rows.is_empty() {
            return Err(FeatherError::Contract("stack_rows of zero rows".into()));
        }
        let cols = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let tr = self.value(r);
            if tr.shape().len() != 1 || tr.numel() != cols {
                return Err(FeatherError::DimensionMismatch {
                    op: "stack_rows",
                    lhs: vec![cols],
                    rhs: tr.shape().to_vec(),
                });
            }
            data.extend_from_slice(tr.data());
        }
        self.push(
            "stack_rows",
            vec![rows.len(), cols],
            data,
            Op::StackRows(rows.to_vec()),
        )
    }

    /// Gather embedding rows for a sequence of symbol ids.
    pub fn embedding(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(FeatherError::Contract(
                "embedding table must be 2-D".into(),
            ));
        }
        let (vocab, dim) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(FeatherError::Input(format!(
                    "symbol id {id} out of vocabulary (size {vocab})"
                )));
            }
            data.extend_from_slice(tt.row(id));
        }
        self.push(
            "embedding",
            vec![ids.len(), dim],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ── reductions ──

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        let total = self
            .value(a)
            .iter()
            .fold(F::zero(), |acc, &x| acc + x);
        self.push("sum_all", vec![1], vec![total], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, F::one() / F::from_f64c(n as f64))
    }

    /// Mean absolute difference over all elements. The absolute-value
    /// subgradient at zero is 0.
    pub fn l1_mean(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        self.mean_all(ad)
    }

    // ── backward ──

    /// Reverse pass from a scalar loss. Returns accumulated gradients for
    /// every node the loss depends on (leaves included).
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(FeatherError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;

        // Accumulate into an input's gradient buffer, creating it lazily.
        macro_rules! acc {
            ($id:expr, $f:expr) => {{
                let tgt: ValueId = $id;
                let n = self.value(tgt).numel();
                let buf = grads[tgt.0].get_or_insert_with(|| vec![F::zero(); n]);
                let f: &mut dyn FnMut(&mut [F]) = &mut $f;
                f(buf.as_mut_slice());
            }};
        }

        match &node.op {
            Op::Leaf | Op::Constant => {}

            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, |gi, _| gi)?;
                self.acc_broadcast(grads, *b, g, |gi, _| gi)?;
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, |gi, _| gi)?;
                self.acc_broadcast(grads, *b, g, |gi, _| -gi)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ai, bi) = (*a, *b);
                // d a += g * b ; d b += g * a, with scalar broadcast on either side
                self.acc_mul_like(grads, ai, g, vb, va)?;
                self.acc_mul_like(grads, bi, g, va, vb)?;
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // y = a / b; da = g / b; db = -g * a / b^2
                if va.shape() == vb.shape() {
                    acc!(*a, |buf: &mut [F]| {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + g[i] / vb.data()[i];
                        }
                    });
                    acc!(*b, |buf: &mut [F]| {
                        for i in 0..buf.len() {
                            let b_i = vb.data()[i];
                            buf[i] = buf[i] - g[i] * va.data()[i] / (b_i * b_i);
                        }
                    });
                } else if va.is_scalar() {
                    let a0 = va.data()[0];
                    acc!(*a, |buf: &mut [F]| {
                        let mut s = F::zero();
                        for i in 0..g.len() {
                            s = s + g[i] / vb.data()[i];
                        }
                        buf[0] = buf[0] + s;
                    });
                    acc!(*b, |buf: &mut [F]| {
                        for i in 0..buf.len() {
                            let b_i = vb.data()[i];
                            buf[i] = buf[i] - g[i] * a0 / (b_i * b_i);
                        }
                    });
                } else {
                    let b0 = vb.data()[0];
                    acc!(*a, |buf: &mut [F]| {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + g[i] / b0;
                        }
                    });
                    acc!(*b, |buf: &mut [F]| {
                        let mut s = F::zero();
                        for i in 0..g.len() {
                            s = s - g[i] * va.data()[i] / (b0 * b0);
                        }
                        buf[0] = buf[0] + s;
                    });
                }
            }
            Op::AddBias(m, bias) => {
                let cols = self.value(*m).cols();
                acc!(*m, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i];
                    }
                });
                acc!(*bias, |buf: &mut [F]| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % cols] = buf[i % cols] + gi;
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                acc!(*a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * k;
                    }
                });
            }
            Op::Exp(a) => {
                acc!(*a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * out.data()[i];
                    }
                });
            }
            Op::Tanh(a) => {
                acc!(*a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        let y = out.data()[i];
                        buf[i] = buf[i] + g[i] * (F::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc!(*a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        let y = out.data()[i];
                        buf[i] = buf[i] + g[i] * y * (F::one() - y);
                    }
                });
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                acc!(*a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * scalar::sigmoid(va.data()[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                acc!(*a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        let x = va.data()[i];
                        let s = if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        buf[i] = buf[i] + g[i] * s;
                    }
                });
            }
            Op::Softmax(input) => {
                let cols = if out.shape().len() == 1 {
                    out.numel()
                } else {
                    out.cols()
                };
                acc!(*input, |buf: &mut [F]| {
                    for (r, grow) in g.chunks(cols).enumerate() {
                        let yrow = &out.data()[r * cols..(r + 1) * cols];
                        let mut dot = F::zero();
                        for i in 0..cols {
                            dot = dot + grow[i] * yrow[i];
                        }
                        let brow = &mut buf[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            brow[i] = brow[i] + yrow[i] * (grow[i] - dot);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                acc!(*a, |buf: &mut [F]| {
                    // dA = G * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * vb.at2(p, j);
                            }
                            buf[i * k + p] = buf[i * k + p] + s;
                        }
                    }
                });
                acc!(*b, |buf: &mut [F]| {
                    // dB = A^T * G
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = F::zero();
                            for i in 0..m {
                                s = s + va.at2(i, p) * g[i * n + j];
                            }
                            buf[p * n + j] = buf[p * n + j] + s;
                        }
                    }
                });
            }
            Op::MatVec(m, v) => {
                let (vm, vv) = (self.value(*m), self.value(*v));
                let (rows, cols) = (vm.rows(), vm.cols());
                acc!(*m, |buf: &mut [F]| {
                    for r in 0..rows {
                        let gr = g[r];
                        let brow = &mut buf[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            brow[c] = brow[c] + gr * vv.data()[c];
                        }
                    }
                });
                acc!(*v, |buf: &mut [F]| {
                    for r in 0..rows {
                        let gr = g[r];
                        let mrow = vm.row(r);
                        for c in 0..cols {
                            buf[c] = buf[c] + gr * mrow[c];
                        }
                    }
                });
            }
            Op::VecMat(v, m) => {
                let (vv, vm) = (self.value(*v), self.value(*m));
                let (rows, cols) = (vm.rows(), vm.cols());
                acc!(*v, |buf: &mut [F]| {
                    for j in 0..rows {
                        let mut s = F::zero();
                        let mrow = vm.row(j);
                        for c in 0..cols {
                            s = s + g[c] * mrow[c];
                        }
                        buf[j] = buf[j] + s;
                    }
                });
                acc!(*m, |buf: &mut [F]| {
                    for j in 0..rows {
                        let w = vv.data()[j];
                        let brow = &mut buf[j * cols..(j + 1) * cols];
                        for c in 0..cols {
                            brow[c] = brow[c] + w * g[c];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let seg = &g[offset..offset + n];
                    acc!(p, |buf: &mut [F]| {
                        for i in 0..n {
                            buf[i] = buf[i] + seg[i];
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { input, start, len } => {
                let (start, len) = (*start, *len);
                acc!(*input, |buf: &mut [F]| {
                    for i in 0..len {
                        buf[start + i] = buf[start + i] + g[i];
                    }
                });
            }
            Op::Row { input, index } => {
                let cols = self.value(*input).cols();
                let index = *index;
                acc!(*input, |buf: &mut [F]| {
                    for c in 0..cols {
                        buf[index * cols + c] = buf[index * cols + c] + g[c];
                    }
                });
            }
            Op::StackRows(rows) => {
                let cols = out.cols();
                for (r, &src) in rows.iter().enumerate() {
                    let seg = &g[r * cols..(r + 1) * cols];
                    acc!(src, |buf: &mut [F]| {
                        for c in 0..cols {
                            buf[c] = buf[c] + seg[c];
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.value(*table).cols();
                acc!(*table, |buf: &mut [F]| {
                    for (r, &id) in ids.iter().enumerate() {
                        let seg = &g[r * dim..(r + 1) * dim];
                        let trow = &mut buf[id * dim..(id + 1) * dim];
                        for c in 0..dim {
                            trow[c] = trow[c] + seg[c];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gs = g[0];
                acc!(*a, |buf: &mut [F]| {
                    for v in buf.iter_mut() {
                        *v = *v + gs;
                    }
                });
            }
        }
        Ok(())
    }

    /// Shared accumulation for Add/Sub where one side may be a scalar.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<F>>],
        target: ValueId,
        g: &[F],
        f: impl Fn(F, usize) -> F,
    ) -> Result<()> {
        let n = self.value(target).numel();
        let buf = grads[target.0].get_or_insert_with(|| vec![F::zero(); n]);
        if n == g.len() {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = *b + f(g[i], i);
            }
        } else {
            // scalar side: sum all contributions
            debug_assert_eq!(n, 1);
            let mut s = F::zero();
            for (i, &gi) in g.iter().enumerate() {
                s = s + f(gi, i);
            }
            buf[0] = buf[0] + s;
        }
        Ok(())
    }

    /// d target += g * other, handling scalar broadcast of either operand.
    fn acc_mul_like(
        &self,
        grads: &mut [Option<Vec<F>>],
        target: ValueId,
        g: &[F],
        other: &Tensor<F>,
        target_val: &Tensor<F>,
    ) -> Result<()> {
        let n = target_val.numel();
        let buf = grads[target.0].get_or_insert_with(|| vec![F::zero(); n]);
        if n == g.len() {
            // target is full-size; other is same size or scalar
            if other.numel() == g.len() {
                for i in 0..n {
                    buf[i] = buf[i] + g[i] * other.data()[i];
                }
            } else {
                let o = other.data()[0];
                for i in 0..n {
                    buf[i] = buf[i] + g[i] * o;
                }
            }
        } else {
            // target is the scalar side
            debug_assert_eq!(n, 1);
            let mut s = F::zero();
            for (i, &gi) in g.iter().enumerate() {
                s = s + gi * other.data()[i];
            }
            buf[0] = buf[0] + s;
        }
        Ok(())
    }
}
