//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a Wengert list: every primitive applied through it is
//! evaluated eagerly and appended as a record holding the operation and
//! references to its inputs. [`Tape::backward`] walks the records in reverse
//! and accumulates vector-Jacobian products into every input that requires a
//! gradient. Records only ever refer to earlier records, so the list is
//! topologically ordered by construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of each primitive operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    MatMulNt,
    Concat,
    Slice,
    Transpose,
    Reshape,
    Sum,
    Mean,
    SumAll,
    MeanAll,
    Sigmoid,
    Tanh,
    Exp,
    Sqrt,
    LeakyRelu,
    Softmax,
    MaskedSoftmax,
    Conv1d,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::MatMulNt => "matmul_nt",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAll => "sum_all",
            Primitive::MeanAll => "mean_all",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Sqrt => "sqrt",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Softmax => "softmax",
            Primitive::MaskedSoftmax => "masked_softmax",
            Primitive::Conv1d => "conv1d",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_PRIMITIVES.iter().copied().find(|p| p.name() == name)
    }
}

pub const ALL_PRIMITIVES: [Primitive; 25] = [
    Primitive::Leaf,
    Primitive::Add,
    Primitive::Sub,
    Primitive::Mul,
    Primitive::Div,
    Primitive::Scale,
    Primitive::AddScalar,
    Primitive::MatMul,
    Primitive::MatMulNt,
    Primitive::Concat,
    Primitive::Slice,
    Primitive::Transpose,
    Primitive::Reshape,
    Primitive::Sum,
    Primitive::Mean,
    Primitive::SumAll,
    Primitive::MeanAll,
    Primitive::Sigmoid,
    Primitive::Tanh,
    Primitive::Exp,
    Primitive::Sqrt,
    Primitive::LeakyRelu,
    Primitive::Softmax,
    Primitive::MaskedSoftmax,
    Primitive::Conv1d,
];

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Transpose(Var, usize, usize),
    Reshape(Var, Vec<usize>),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    LeakyRelu(Var, f64),
    Softmax(Var, usize),
    MaskedSoftmax(Var, Vec<bool>),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
    },
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::MatMul(..) => Primitive::MatMul,
            Op::MatMulNt(..) => Primitive::MatMulNt,
            Op::Concat(..) => Primitive::Concat,
            Op::Slice { .. } => Primitive::Slice,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Sum(..) => Primitive::Sum,
            Op::Mean(..) => Primitive::Mean,
            Op::SumAll(..) => Primitive::SumAll,
            Op::MeanAll(..) => Primitive::MeanAll,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Exp(..) => Primitive::Exp,
            Op::Sqrt(..) => Primitive::Sqrt,
            Op::LeakyRelu(..) => Primitive::LeakyRelu,
            Op::Softmax(..) => Primitive::Softmax,
            Op::MaskedSoftmax(..) => Primitive::MaskedSoftmax,
            Op::Conv1d { .. } => Primitive::Conv1d,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Conv1d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Slice { input: a, .. }
            | Op::Transpose(a, ..)
            | Op::Reshape(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::LeakyRelu(a, _)
            | Op::Softmax(a, _)
            | Op::MaskedSoftmax(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    fault: Option<Primitive>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose backward rule for `primitive` is deliberately wrong
    /// (scaled by 1.5). Used to prove that gradient checks catch faults.
    pub fn with_fault(primitive: Primitive) -> Self {
        Self {
            fault: Some(primitive),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf tensor. Gradients are only tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Primitive that produced `var`.
    pub fn primitive(&self, var: Var) -> Primitive {
        self.nodes[var.0].op.primitive()
    }

    /// Inputs of the record that produced `var`.
    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = compute(&op, &self.nodes)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.primitive().name(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }

    /// `(..., m, k) x (k, n)` or batched `(b.., m, k) x (b.., k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a x bᵀ` for `a: (..., k)` and `b: (n, k)`; the shape of every
    /// `y = x Wᵀ` layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat(inputs.to_vec(), axis))
    }

    /// `len` entries along `axis`, starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice {
            input,
            axis,
            start,
            len,
        })
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, input: Var, axis_a: usize, axis_b: usize) -> Result<Var> {
        self.push(Op::Transpose(input, axis_a, axis_b))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(input, shape.to_vec()))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.push(Op::Sum(input, axis))
    }

    /// Mean over `axis`, dropping it.
    pub fn mean(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.push(Op::Mean(input, axis))
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        self.push(Op::SumAll(input))
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        self.push(Op::MeanAll(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Sigmoid(input))
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Tanh(input))
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Exp(input))
    }

    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Sqrt(input))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        self.push(Op::LeakyRelu(input, slope))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax(input, axis))
    }

    /// Softmax over the last axis restricted to entries where `mask` is set.
    ///
    /// `mask` is row-major over the last two dimensions and is broadcast
    /// across the leading ones. Masked-out entries come out as exactly zero.
    pub fn masked_softmax(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        self.push(Op::MaskedSoftmax(input, mask.to_vec()))
    }

    /// Cross-correlation of `input: (batch, in_ch, len)` with
    /// `kernel: (out_ch, in_ch, k)` plus `bias: (out_ch)`, zero padded by
    /// `padding` on both ends.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        self.push(Op::Conv1d {
            input,
            kernel,
            bias,
            padding,
        })
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if loss.0 + 1 != self.nodes.len() {
            return Err(invalid("backward", "loss must be the last record on the tape"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            if self.fault == Some(node.op.primitive()) {
                let corrupted: Vec<f64> = g.iter().map(|v| 1.5 * v).collect();
                backprop(&self.nodes, i, &corrupted, lower);
            } else {
                backprop(&self.nodes, i, g, lower);
            }
            // Intermediate gradients are not needed once propagated.
            upper[0] = None;
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `var`.
    ///
    /// Leaves that require a gradient but did not influence the loss get a
    /// zero tensor. Returns `None` before `backward` and for values that do
    /// not track gradients.
    pub fn grad(&self, var: Var) -> Option<Tensor> {
        if !self.consumed || !self.nodes[var.0].requires_grad {
            return None;
        }
        let shape = self.nodes[var.0].value.shape().to_vec();
        match self.grads.get(var.0).and_then(Option::as_ref) {
            Some(g) => Some(Tensor::from_parts(shape, g.clone())),
            None => Some(Tensor::zeros(&shape)),
        }
    }

    /// Re-evaluates every record from the recorded leaves.
    pub fn replay(&self) -> Result<Tape> {
        let mut out = Tape {
            fault: self.fault,
            ..Tape::default()
        };
        for node in &self.nodes {
            match &node.op {
                Op::Leaf => {
                    out.leaf(node.value.clone(), node.requires_grad);
                }
                op => {
                    out.push(op.clone())?;
                }
            }
        }
        Ok(out)
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Offsets of both operands for every element of a broadcast binary op.
///
/// Axes of size one are dropped and adjacent axes that are contiguous in
/// both operands are merged, so the common cases (equal shapes, a bias
/// over the last axis, a per-row statistic) reduce to one or two loops.
struct Walk {
    dims: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Walk {
    fn new(out: &[usize], a: &[usize], b: &[usize]) -> Self {
        let eff = |shape: &[usize]| -> Vec<usize> {
            let offset = out.len() - shape.len();
            let st = strides(shape);
            let mut e = vec![0; out.len()];
            for k in 0..shape.len() {
                if shape[k] != 1 {
                    e[offset + k] = st[k];
                }
            }
            e
        };
        let (ea, eb) = (eff(a), eff(b));
        let mut walk = Walk {
            dims: Vec::with_capacity(out.len()),
            sa: Vec::with_capacity(out.len()),
            sb: Vec::with_capacity(out.len()),
        };
        for k in 0..out.len() {
            let d = out[k];
            if d == 1 {
                continue;
            }
            if let Some(last) = walk.dims.len().checked_sub(1) {
                if walk.sa[last] == ea[k] * d && walk.sb[last] == eb[k] * d {
                    walk.dims[last] *= d;
                    walk.sa[last] = ea[k];
                    walk.sb[last] = eb[k];
                    continue;
                }
            }
            walk.dims.push(d);
            walk.sa.push(ea[k]);
            walk.sb.push(eb[k]);
        }
        walk
    }

    /// Calls `f(i, offset_a, offset_b)` for every output index `i` in order.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let Some(last) = self.dims.len().checked_sub(1) else {
            f(0, 0, 0);
            return;
        };
        let (inner, ia, ib) = (self.dims[last], self.sa[last], self.sb[last]);
        let outer: usize = self.dims[..last].iter().product();
        let mut idx = vec![0; last];
        let (mut oa, mut ob) = (0, 0);
        let mut i = 0;
        for _ in 0..outer {
            for j in 0..inner {
                f(i, oa + j * ia, ob + j * ib);
                i += 1;
            }
            for ax in (0..last).rev() {
                idx[ax] += 1;
                oa += self.sa[ax];
                ob += self.sb[ax];
                if idx[ax] < self.dims[ax] {
                    break;
                }
                oa -= self.sa[ax] * self.dims[ax];
                ob -= self.sb[ax] * self.dims[ax];
                idx[ax] = 0;
            }
        }
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let mut data = Vec::with_capacity(shape.iter().product());
        Walk::new(&shape, a.shape(), b.shape()).for_each(|_, i, j| data.push(f(ad[i], bd[j])));
        data
    };
    Ok(Tensor::from_parts(shape, data))
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, dim, inner) element counts.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `C (m x n, row-major) (+)= A (m x k) B (k x n)` with arbitrary strides on
/// `A` and `B`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    assert!(m * n <= c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

enum MatMulPlan {
    /// Leading dims of the lhs flattened into one GEMM against a 2-D rhs.
    Flat { m: usize, k: usize, n: usize },
    Batched {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<(MatMulPlan, Vec<usize>)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let k = a[a.len() - 1];
    if b[b.len() - 2] != k {
        return Err(mismatch());
    }
    let n = b[b.len() - 1];
    let mut out = a[..a.len() - 1].to_vec();
    out.push(n);
    if b.len() == 2 {
        let m = a[..a.len() - 1].iter().product();
        return Ok((MatMulPlan::Flat { m, k, n }, out));
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(mismatch());
    }
    let batch = a[..a.len() - 2].iter().product();
    let m = a[a.len() - 2];
    Ok((MatMulPlan::Batched { batch, m, k, n }, out))
}

fn compute(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
    Ok(match op {
        Op::Leaf => unreachable!("leaves are never recomputed"),
        Op::Add(a, b) => binary("add", val(a), val(b), |x, y| x + y)?,
        Op::Sub(a, b) => binary("sub", val(a), val(b), |x, y| x - y)?,
        Op::Mul(a, b) => binary("mul", val(a), val(b), |x, y| x * y)?,
        Op::Div(a, b) => binary("div", val(a), val(b), |x, y| x / y)?,
        Op::Scale(a, s) => unary(val(a), |x| x * s),
        Op::AddScalar(a, c) => unary(val(a), |x| x + c),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (plan, shape) = matmul_plan(a.shape(), b.shape())?;
            let mut out = vec![0.0; shape.iter().product()];
            match plan {
                MatMulPlan::Flat { m, k, n } => {
                    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, false)
                }
                MatMulPlan::Batched { batch, m, k, n } => {
                    for p in 0..batch {
                        gemm(
                            m,
                            k,
                            n,
                            &a.data()[p * m * k..(p + 1) * m * k],
                            (k, 1),
                            &b.data()[p * k * n..(p + 1) * k * n],
                            (n, 1),
                            &mut out[p * m * n..(p + 1) * m * n],
                            false,
                        );
                    }
                }
            }
            Tensor::from_parts(shape, out)
        }
        Op::MatMulNt(a, b) => {
            let (a, b) = (val(a), val(b));
            let k = *a.shape().last().unwrap_or(&1);
            if a.rank() == 0 || b.rank() != 2 || b.shape()[1] != k {
                return Err(Error::ShapeMismatch {
                    op: "matmul_nt",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let n = b.shape()[0];
            let m = a.numel() / k;
            let mut shape = a.shape()[..a.rank() - 1].to_vec();
            shape.push(n);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), &mut out, false);
            Tensor::from_parts(shape, out)
        }
        Op::Concat(xs, axis) => {
            let first = xs
                .first()
                .ok_or_else(|| invalid("concat", "no inputs"))
                .map(val)?;
            check_axis("concat", first.shape(), *axis)?;
            let mut shape = first.shape().to_vec();
            shape[*axis] = 0;
            for x in xs {
                let s = val(x).shape();
                let compatible = s.len() == first.rank()
                    && s.iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(ax, (d, f))| ax == *axis || d == f);
                if !compatible {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                shape[*axis] += s[*axis];
            }
            let (outer, _, inner) = around(&shape, *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for x in xs {
                    let x = val(x);
                    let chunk = x.shape()[*axis] * inner;
                    out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, out)
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            let x = val(input);
            check_axis("slice", x.shape(), *axis)?;
            if *len == 0 || start + len > x.shape()[*axis] {
                return Err(invalid(
                    "slice",
                    format!("range {start}..{} out of bounds for shape {:?}", start + len, x.shape()),
                ));
            }
            let (outer, dim, inner) = around(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            Tensor::from_parts(shape, out)
        }
        Op::Transpose(input, a, b) => {
            let x = val(input);
            check_axis("transpose", x.shape(), *a)?;
            check_axis("transpose", x.shape(), *b)?;
            let (shape, data) = swap_axes(x.shape(), x.data(), *a, *b);
            Tensor::from_parts(shape, data)
        }
        Op::Reshape(input, shape) => val(input).clone().reshape(shape.clone())?,
        Op::Sum(input, axis) | Op::Mean(input, axis) => {
            let x = val(input);
            check_axis("sum", x.shape(), *axis)?;
            let (outer, dim, inner) = around(x.shape(), *axis);
            let scale = if matches!(op, Op::Mean(..)) {
                1.0 / dim as f64
            } else {
                1.0
            };
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for d in 0..dim {
                    let row = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Tensor::from_parts(shape, out)
        }
        Op::SumAll(input) => Tensor::scalar(val(input).data().iter().sum()),
        Op::MeanAll(input) => {
            let x = val(input);
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        }
        Op::Sigmoid(a) => unary(val(a), sigmoid),
        Op::Tanh(a) => unary(val(a), libm::tanh),
        Op::Exp(a) => unary(val(a), libm::exp),
        Op::Sqrt(a) => {
            let x = val(a);
            if x.data().iter().any(|&v| v < 0.0) {
                return Err(invalid("sqrt", "negative input"));
            }
            unary(x, libm::sqrt)
        }
        Op::LeakyRelu(a, slope) => unary(val(a), |x| if x > 0.0 { x } else { slope * x }),
        Op::Softmax(input, axis) => {
            let x = val(input);
            check_axis("softmax", x.shape(), *axis)?;
            let (outer, dim, inner) = around(x.shape(), *axis);
            let mut out = vec![0.0; x.numel()];
            let xd = x.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let max = (0..dim).map(|d| xd[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for d in 0..dim {
                        let e = libm::exp(xd[at(d)] - max);
                        out[at(d)] = e;
                        total += e;
                    }
                    for d in 0..dim {
                        out[at(d)] /= total;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::MaskedSoftmax(input, mask) => {
            let x = val(input);
            let r = x.rank();
            if r < 2 || mask.len() != x.shape()[r - 2] * x.shape()[r - 1] {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: x.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
            let mut out = vec![0.0; x.numel()];
            for (row, (xs, ys)) in x.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
                let m = &mask[(row % rows) * cols..(row % rows + 1) * cols];
                let max = xs
                    .iter()
                    .zip(m)
                    .filter(|(_, &keep)| keep)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(invalid(
                        "masked_softmax",
                        format!("row {} has an empty neighbor set", row % rows),
                    ));
                }
                let mut total = 0.0;
                for ((y, &v), &keep) in ys.iter_mut().zip(xs).zip(m) {
                    if keep {
                        *y = libm::exp(v - max);
                        total += *y;
                    }
                }
                ys.iter_mut().for_each(|y| *y /= total);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::Conv1d {
            input,
            kernel,
            bias,
            padding,
        } => {
            let (x, w, b) = (val(input), val(kernel), val(bias));
            let geom = conv_geometry(x.shape(), w.shape(), b.shape(), *padding)?;
            let ConvGeometry {
                batch,
                in_ch,
                out_ch,
                len,
                k,
                out_len,
            } = geom;
            let (xd, wd) = (x.data(), w.data());
            let mut out = vec![0.0; batch * out_ch * out_len];
            for bi in 0..batch {
                for o in 0..out_ch {
                    let dst = &mut out[(bi * out_ch + o) * out_len..(bi * out_ch + o + 1) * out_len];
                    dst.iter_mut().for_each(|v| *v = b.data()[o]);
                    for c in 0..in_ch {
                        let src = &xd[(bi * in_ch + c) * len..(bi * in_ch + c + 1) * len];
                        let taps = &wd[(o * in_ch + c) * k..(o * in_ch + c + 1) * k];
                        for (t, y) in dst.iter_mut().enumerate() {
                            for (j, &wk) in taps.iter().enumerate() {
                                if let Some(pos) = (t + j).checked_sub(*padding) {
                                    if pos < len {
                                        *y += wk * src[pos];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![batch, out_ch, out_len], out)
        }
    })
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    len: usize,
    k: usize,
    out_len: usize,
}

fn conv_geometry(x: &[usize], w: &[usize], b: &[usize], padding: usize) -> Result<ConvGeometry> {
    if x.len() != 3 || w.len() != 3 || x[1] != w[1] {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    if b != [w[0]] {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            lhs: w.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let padded = x[2] + 2 * padding;
    if padded < w[2] {
        return Err(invalid(
            "conv1d",
            format!("kernel size {} exceeds padded length {padded}", w[2]),
        ));
    }
    Ok(ConvGeometry {
        batch: x[0],
        in_ch: x[1],
        out_ch: w[0],
        len: x[2],
        k: w[2],
        out_len: padded - w[2] + 1,
    })
}

fn swap_axes(shape: &[usize], data: &[f64], a: usize, b: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    if a == b {
        return (out_shape, data.to_vec());
    }
    let mut eff = strides(shape);
    eff.swap(a, b);
    let rank = shape.len();
    let mut idx = vec![0; rank];
    let mut cur = 0;
    let mut out = Vec::with_capacity(data.len());
    for _ in 0..data.len() {
        out.push(data[cur]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contribution: &[f64]) {
    if let Some(dst) = slot(grads, nodes, v) {
        for (d, c) in dst.iter_mut().zip(contribution) {
            *d += c;
        }
    }
}

/// Accumulates the vector-Jacobian product of record `i` into `grads`,
/// which covers every earlier record.
fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let out = node.value.shape();
            let walk = Walk::new(out, val(a).shape(), val(b).shape());
            if let Some(dst) = slot(grads, nodes, *a) {
                if val(a).shape() == out {
                    dst.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                } else {
                    walk.for_each(|k, ia, _| dst[ia] += g[k]);
                }
            }
            if let Some(dst) = slot(grads, nodes, *b) {
                if val(b).shape() == out {
                    dst.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv);
                } else {
                    walk.for_each(|k, _, ib| dst[ib] += sign * g[k]);
                }
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let div = matches!(node.op, Op::Div(..));
            let out = node.value.shape();
            let (av, bv) = (val(a), val(b));
            let walk = Walk::new(out, av.shape(), bv.shape());
            let (ad, bd) = (av.data(), bv.data());
            if let Some(dst) = slot(grads, nodes, *a) {
                walk.for_each(|k, ia, ib| {
                    let bk = bd[ib];
                    dst[ia] += if div { g[k] / bk } else { g[k] * bk };
                });
            }
            if let Some(dst) = slot(grads, nodes, *b) {
                walk.for_each(|k, ia, ib| {
                    let (ak, bk) = (ad[ia], bd[ib]);
                    dst[ib] += if div { -g[k] * ak / (bk * bk) } else { g[k] * ak };
                });
            }
        }
        Op::Scale(a, s) => {
            if let Some(dst) = slot(grads, nodes, *a) {
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += s * gv;
                }
            }
        }
        Op::AddScalar(a, _) | Op::Reshape(a, _) => accumulate(grads, nodes, *a, g),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (plan, _) = matmul_plan(av.shape(), bv.shape()).expect("validated in forward");
            match plan {
                MatMulPlan::Flat { m, k, n } => {
                    if let Some(dst) = slot(grads, nodes, *a) {
                        gemm(m, n, k, g, (n, 1), bv.data(), (1, n), dst, true);
                    }
                    if let Some(dst) = slot(grads, nodes, *b) {
                        gemm(k, m, n, av.data(), (1, k), g, (n, 1), dst, true);
                    }
                }
                MatMulPlan::Batched { batch, m, k, n } => {
                    if let Some(dst) = slot(grads, nodes, *a) {
                        for p in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[p * m * n..(p + 1) * m * n],
                                (n, 1),
                                &bv.data()[p * k * n..(p + 1) * k * n],
                                (1, n),
                                &mut dst[p * m * k..(p + 1) * m * k],
                                true,
                            );
                        }
                    }
                    if let Some(dst) = slot(grads, nodes, *b) {
                        for p in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[p * m * k..(p + 1) * m * k],
                                (1, k),
                                &g[p * m * n..(p + 1) * m * n],
                                (n, 1),
                                &mut dst[p * k * n..(p + 1) * k * n],
                                true,
                            );
                        }
                    }
                }
            }
        }
        Op::MatMulNt(a, b) => {
            let (av, bv) = (val(a), val(b));
            let k = bv.shape()[1];
            let n = bv.shape()[0];
            let m = av.numel() / k;
            if let Some(dst) = slot(grads, nodes, *a) {
                gemm(m, n, k, g, (n, 1), bv.data(), (k, 1), dst, true);
            }
            if let Some(dst) = slot(grads, nodes, *b) {
                gemm(n, m, k, g, (1, n), av.data(), (k, 1), dst, true);
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = around(node.value.shape(), *axis);
            let mut offset = 0;
            let total = node.value.shape()[*axis] * inner;
            for x in xs {
                let chunk = val(x).shape()[*axis] * inner;
                if let Some(dst) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, s) in dst[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            let (outer, dim, inner) = around(val(input).shape(), *axis);
            if let Some(dst) = slot(grads, nodes, *input) {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in dst[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::Transpose(input, a, b) => {
            let (_, back) = swap_axes(node.value.shape(), g, *a, *b);
            accumulate(grads, nodes, *input, &back);
        }
        Op::Sum(input, axis) | Op::Mean(input, axis) => {
            let (outer, dim, inner) = around(val(input).shape(), *axis);
            let scale = if matches!(node.op, Op::Mean(..)) {
                1.0 / dim as f64
            } else {
                1.0
            };
            if let Some(dst) = slot(grads, nodes, *input) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        let row = &mut dst[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (r, s) in row.iter_mut().zip(src) {
                            *r += scale * s;
                        }
                    }
                }
            }
        }
        Op::SumAll(input) | Op::MeanAll(input) => {
            let n = val(input).numel();
            let scale = if matches!(node.op, Op::MeanAll(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            if let Some(dst) = slot(grads, nodes, *input) {
                dst.iter_mut().for_each(|d| *d += scale * g[0]);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(dst) = slot(grads, nodes, *a) {
                for ((d, gv), yv) in dst.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(dst) = slot(grads, nodes, *a) {
                for ((d, gv), yv) in dst.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(dst) = slot(grads, nodes, *a) {
                for ((d, gv), yv) in dst.iter_mut().zip(g).zip(y) {
                    *d += gv * yv;
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(dst) = slot(grads, nodes, *a) {
                for ((d, gv), yv) in dst.iter_mut().zip(g).zip(y) {
                    *d += gv * 0.5 / yv;
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(a).data();
            if let Some(dst) = slot(grads, nodes, *a) {
                for ((d, gv), xv) in dst.iter_mut().zip(g).zip(x) {
                    *d += if *xv > 0.0 { *gv } else { slope * gv };
                }
            }
        }
        Op::Softmax(input, axis) => {
            let (outer, dim, inner) = around(node.value.shape(), *axis);
            if let Some(dst) = slot(grads, nodes, *input) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let dot: f64 = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                        for d in 0..dim {
                            dst[at(d)] += y[at(d)] * (g[at(d)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax(input, _) => {
            let cols = *node.value.shape().last().expect("rank checked in forward");
            if let Some(dst) = slot(grads, nodes, *input) {
                for ((ds, gs), ys) in dst.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in ds.iter_mut().zip(gs).zip(ys) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::Conv1d {
            input,
            kernel,
            bias,
            padding,
        } => {
            let (x, w) = (val(input), val(kernel));
            let ConvGeometry {
                batch,
                in_ch,
                out_ch,
                len,
                k,
                out_len,
            } = conv_geometry(x.shape(), w.shape(), val(bias).shape(), *padding)
                .expect("validated in forward");
            let (xd, wd) = (x.data(), w.data());
            let tap = |t: usize, j: usize| (t + j).checked_sub(*padding).filter(|&p| p < len);
            if let Some(dst) = slot(grads, nodes, *bias) {
                for bi in 0..batch {
                    for (o, d) in dst.iter_mut().enumerate() {
                        *d += g[(bi * out_ch + o) * out_len..(bi * out_ch + o + 1) * out_len]
                            .iter()
                            .sum::<f64>();
                    }
                }
            }
            if let Some(dst) = slot(grads, nodes, *kernel) {
                for bi in 0..batch {
                    for o in 0..out_ch {
                        let go = &g[(bi * out_ch + o) * out_len..(bi * out_ch + o + 1) * out_len];
                        for c in 0..in_ch {
                            let src = &xd[(bi * in_ch + c) * len..(bi * in_ch + c + 1) * len];
                            for j in 0..k {
                                let mut acc = 0.0;
                                for (t, gv) in go.iter().enumerate() {
                                    if let Some(p) = tap(t, j) {
                                        acc += gv * src[p];
                                    }
                                }
                                dst[(o * in_ch + c) * k + j] += acc;
                            }
                        }
                    }
                }
            }
            if let Some(dst) = slot(grads, nodes, *input) {
                for bi in 0..batch {
                    for o in 0..out_ch {
                        let go = &g[(bi * out_ch + o) * out_len..(bi * out_ch + o + 1) * out_len];
                        for c in 0..in_ch {
                            let taps = &wd[(o * in_ch + c) * k..(o * in_ch + c + 1) * k];
                            let row = &mut dst[(bi * in_ch + c) * len..(bi * in_ch + c + 1) * len];
                            for (t, gv) in go.iter().enumerate() {
                                for (j, wk) in taps.iter().enumerate() {
                                    if let Some(p) = tap(t, j) {
                                        row[p] += gv * wk;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &t(&[2, 1], &[3.0, 7.0]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_last_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_rejects_mismatched_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[3, 1]));
        assert!(tape.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates_branch_gradients() {
        let mut tape = Tape::new();
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.param(t(&[2, 1], &[0.5, -1.0]));
        let b1 = tape.matmul(w, x).unwrap();
        let b2 = tape.matmul(w, x).unwrap();
        let both = tape.add(b1, b2).unwrap();
        let loss = tape.mean_all(both).unwrap();
        tape.backward(loss).unwrap();
        // d mean(Wx) / dx = column sums of W / 2, once per branch.
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_needs_scalar_and_runs_once() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(Error::TapeConsumed));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1], 1000.0));
        assert_eq!(tape.exp(x), Err(Error::NonFinite { op: "exp" }));
    }

    #[test]
    fn broadcasting_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2, 1, 3]));
        let y = tape.param(Tensor::ones(&[4, 1]));
        let z = tape.add(x, y).unwrap();
        assert_eq!(tape.shape(z), &[2, 4, 3]);
        let loss = tape.sum_all(z).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 4.0));
        assert!(tape.grad(y).unwrap().data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.transpose(x, 0, 1).unwrap();
        assert_eq!(tape.value(y), &t(&[3, 2], &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.masked_softmax(x, &[true, false, true, false, false, false]);
        assert!(y.is_err(), "second row has no neighbors");
        let y = tape
            .masked_softmax(x, &[true, false, true, true, true, true])
            .unwrap();
        assert_eq!(&tape.value(y).data()[..3], &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn conv1d_moving_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv1d(x, w, b, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.3, -1.2, 2.5, 0.7]));
        let y = tape.tanh(x).unwrap();
        let z = tape.softmax(y, 1).unwrap();
        let w = tape.matmul(z, x).unwrap();
        tape.sum_all(w).unwrap();
        let replayed = tape.replay().unwrap();
        assert_eq!(replayed.len(), tape.len());
        for i in 0..tape.len() {
            assert_eq!(replayed.value(Var(i)), tape.value(Var(i)));
        }
    }
}
