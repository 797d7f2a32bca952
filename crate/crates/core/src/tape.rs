//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the rule that
//! maps an output gradient back to its inputs. Nodes are only ever appended,
//! so inputs always precede the nodes that consume them and a single reverse
//! sweep visits each node once.
//!
//! Broadcasting is limited to scalar-with-tensor and adding (or multiplying)
//! a row vector into every row of a matrix.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Precision, Tensor};

/// Negative-side slope of [`Tape::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Lower bound on the denominator of a cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Largest argument accepted by [`Tape::exp`] before the result overflows.
const EXP_MAX_ARG: f64 = 709.0;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operations exposed through [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    MulElementwise,
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    SoftmaxRows,
    ConcatRows,
    CosineSimilarity,
    LeakyRelu,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::MulElementwise,
        OpKind::Scale(-1.5),
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SoftmaxRows,
        OpKind::ConcatRows,
        OpKind::CosineSimilarity,
        OpKind::LeakyRelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::MulElementwise => "mul_elementwise",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::CosineSimilarity => "cosine_similarity",
            OpKind::LeakyRelu => "leaky_relu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    RowRhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    LeakyRelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Cosine(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Confined to one thread; independent tapes may run
/// concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires one.
    /// Leaves that require gradients but do not reach the loss get zeros.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but panics when the variable has no gradient.
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for {var:?}"))
    }
}

fn row_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        &[r, c] => Some((r, c)),
        &[c] => Some((1, c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        let value = value.with_requires_grad(needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Dispatches one of the enumerated operation kinds.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let unary = |inputs: &[Var]| -> Result<Var> {
            match inputs {
                [x] => Ok(*x),
                _ => Err(Error::Domain {
                    op: kind.name(),
                    detail: format!("expected 1 input, got {}", inputs.len()),
                }),
            }
        };
        let binary = |inputs: &[Var]| -> Result<(Var, Var)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::Domain {
                    op: kind.name(),
                    detail: format!("expected 2 inputs, got {}", inputs.len()),
                }),
            }
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            OpKind::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            OpKind::Sub => {
                let (a, b) = binary(inputs)?;
                self.sub(a, b)
            }
            OpKind::MulElementwise => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            OpKind::Scale(c) => Ok(self.scale(unary(inputs)?, c)),
            OpKind::Relu => Ok(self.relu(unary(inputs)?)),
            OpKind::Sigmoid => Ok(self.sigmoid(unary(inputs)?)),
            OpKind::Tanh => Ok(self.tanh(unary(inputs)?)),
            OpKind::Exp => self.exp(unary(inputs)?),
            OpKind::Log => self.log(unary(inputs)?),
            OpKind::Sum => Ok(self.sum(unary(inputs)?)),
            OpKind::Mean => Ok(self.mean(unary(inputs)?)),
            OpKind::SoftmaxRows => self.softmax_rows(unary(inputs)?),
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::CosineSimilarity => {
                let (a, b) = binary(inputs)?;
                self.cosine_similarity(a, b)
            }
            OpKind::LeakyRelu => Ok(self.leaky_relu(unary(inputs)?)),
        }
    }

    /// `a @ b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av
            .dims2()
            .ok_or_else(|| Error::shape("matmul", av.shape(), bv.shape()))?;
        let (k2, n) = bv
            .dims2()
            .ok_or_else(|| Error::shape("matmul", av.shape(), bv.shape()))?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<(Broadcast, Vec<usize>)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            return Ok((Broadcast::Same, av.shape().to_vec()));
        }
        // when both hold one element the result keeps the higher-rank shape
        if bv.len() == 1 && (av.len() != 1 || av.rank() >= bv.rank()) {
            return Ok((Broadcast::ScalarRhs, av.shape().to_vec()));
        }
        if av.len() == 1 {
            return Ok((Broadcast::ScalarLhs, bv.shape().to_vec()));
        }
        if let (Some((_, c)), Some((1, c2))) = (av.dims2(), row_dims(bv)) {
            if c == c2 {
                return Ok((Broadcast::RowRhs, av.shape().to_vec()));
            }
        }
        Err(Error::shape(op, av.shape(), bv.shape()))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let (kind, shape) = self.broadcast_kind(name, a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match kind {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarLhs => bv.iter().map(|&y| f(av[0], y)).collect(),
            Broadcast::ScalarRhs => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::RowRhs => {
                let c = bv.len();
                av.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % c]))
                    .collect()
            }
        };
        let value = Tensor::new(shape, data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, make(a, b, kind), g))
    }

    /// Elementwise sum; `b` may be a scalar or a row vector added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul_elementwise", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let g = self.any_grad(&[x]);
        self.push(value, op, g)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    /// Rectifier with subgradient 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { LEAKY_RELU_SLOPE * v },
            Op::LeakyRelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        if let Some(&v) = self.value(x).data().iter().find(|&&v| !(v <= EXP_MAX_ARG)) {
            return Err(Error::Domain {
                op: "exp",
                detail: format!("argument {v} overflows"),
            });
        }
        Ok(self.unary(x, f64::exp, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&v) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {v}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// `x^p` for a constant exponent. Negative bases are rejected, as is a
    /// zero base when the derivative would be unbounded.
    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let bad = self
            .value(x)
            .data()
            .iter()
            .find(|&&v| v < 0.0 || (v == 0.0 && p != 0.0 && p < 1.0) || v.is_nan());
        if let Some(&v) = bad {
            return Err(Error::Domain {
                op: "pow",
                detail: format!("base {v} with exponent {p}"),
            });
        }
        Ok(self.unary(x, |v| v.powf(p), Op::Pow(x, p)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), g)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), g))
    }

    /// Row-wise softmax of a rank-2 tensor (a rank-1 tensor is one row).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = row_dims(xv).ok_or_else(|| Error::shape("softmax_rows", xv.shape(), &[]))?;
        let mut out = xv.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c], None);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), g))
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Masked
    /// entries are zero; a row with no unmasked entry is all zero.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) =
            row_dims(xv).ok_or_else(|| Error::shape("masked_softmax_rows", xv.shape(), &[]))?;
        if mask.len() != r * c {
            return Err(Error::shape("masked_softmax_rows", xv.shape(), &[mask.len()]));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c], Some(&mask[i * c..(i + 1) * c]));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaskedSoftmaxRows(x), g))
    }

    /// Stacks rank-2 tensors (or rank-1 rows) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Domain {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let (_, cols) = row_dims(self.value(*first))
            .ok_or_else(|| Error::shape("concat_rows", self.value(*first).shape(), &[]))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            match row_dims(pv) {
                Some((r, c)) if c == cols => {
                    rows += r;
                    data.extend_from_slice(pv.data());
                }
                _ => {
                    return Err(Error::shape(
                        "concat_rows",
                        self.value(*first).shape(),
                        pv.shape(),
                    ))
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Pairwise cosine similarity between the rows of `a` (n x h) and `b`
    /// (m x h), giving n x m. Two vectors give a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, h) = row_dims(av)
            .ok_or_else(|| Error::shape("cosine_similarity", av.shape(), bv.shape()))?;
        let (m, h2) = row_dims(bv)
            .ok_or_else(|| Error::shape("cosine_similarity", av.shape(), bv.shape()))?;
        if h != h2 {
            return Err(Error::shape("cosine_similarity", av.shape(), bv.shape()));
        }
        let na = row_norms(av.data(), n, h);
        let nb = row_norms(bv.data(), m, h);
        let mut dots = vec![0.0; n * m];
        gemm(n, h, m, av.data(), false, bv.data(), true, &mut dots, false);
        for i in 0..n {
            for j in 0..m {
                dots[i * m + j] /= (na[i] * nb[j]).max(COSINE_EPS);
            }
        }
        let shape = if av.rank() == 1 && bv.rank() == 1 {
            Vec::new()
        } else {
            vec![n, m]
        };
        let value = Tensor::new(shape, dots)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Cosine(a, b), g))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_seeded(&[(loss, Tensor::ones(lv.shape()))])
    }

    /// Reverse sweep with explicit output gradients for one or more nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (var, g) in seeds {
            let v = self.value(*var);
            if v.shape() != g.shape() {
                return Err(Error::shape("backward", v.shape(), g.shape()));
            }
            accumulate(&mut grads[var.0], g.data());
            last = last.max(var.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let precision = self.precision;
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !(node.needs_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let mut data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                precision.round_slice(&mut data);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("matmul lhs");
                let n = bv.cols();
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), true, &mut ga, false);
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g, false, &mut gb, false);
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let ga = reduce_broadcast(g, *kind, Side::Lhs, self.value(*a).len());
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let mut gb = reduce_broadcast(g, *kind, Side::Rhs, self.value(*b).len());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let at = |i: usize, side: Side| -> f64 {
                    // value of the *other* operand aligned to output index i
                    match (side, kind) {
                        (Side::Lhs, Broadcast::Same) => bv[i],
                        (Side::Lhs, Broadcast::ScalarRhs) => bv[0],
                        (Side::Lhs, Broadcast::ScalarLhs) => bv[i],
                        (Side::Lhs, Broadcast::RowRhs) => bv[i % bv.len()],
                        (Side::Rhs, Broadcast::ScalarLhs) => av[0],
                        (Side::Rhs, _) => av[i],
                    }
                };
                if self.wants(*a) {
                    let prod: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(i, Side::Lhs)).collect();
                    let ga = reduce_broadcast(&prod, *kind, Side::Lhs, av.len());
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(i, Side::Rhs)).collect();
                    let gb = reduce_broadcast(&prod, *kind, Side::Rhs, bv.len());
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Shift(x) => accumulate(&mut grads[x.0], g),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::LeakyRelu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { LEAKY_RELU_SLOPE * gi })
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * y).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = g.iter().zip(xv).map(|(gi, v)| gi / v).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Pow(x, p) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| if *p == 0.0 { 0.0 } else { gi * p * v.powf(p - 1.0) })
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, v)| if v >= lo && v <= hi { *gi } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gx = vec![g[0] / n as f64; n];
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2().expect("transpose output");
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::SoftmaxRows(x) | Op::MaskedSoftmaxRows(x) => {
                let (r, c) = row_dims(&node.value).expect("softmax output");
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, h) = row_dims(av).expect("cosine lhs");
                let (m, _) = row_dims(bv).expect("cosine rhs");
                let (ad, bd) = (av.data(), bv.data());
                let na = row_norms(ad, n, h);
                let nb = row_norms(bd, m, h);
                let mut ga = vec![0.0; n * h];
                let mut gb = vec![0.0; m * h];
                for i in 0..n {
                    let ai = &ad[i * h..(i + 1) * h];
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = &bd[j * h..(j + 1) * h];
                        let prod = na[i] * nb[j];
                        let cos = out[i * m + j];
                        if prod > COSINE_EPS {
                            let inv = gij / prod;
                            let ca = gij * cos / (na[i] * na[i]);
                            let cb = gij * cos / (nb[j] * nb[j]);
                            for t in 0..h {
                                ga[i * h + t] += inv * bj[t] - ca * ai[t];
                                gb[j * h + t] += inv * ai[t] - cb * bj[t];
                            }
                        } else {
                            let inv = gij / COSINE_EPS;
                            for t in 0..h {
                                ga[i * h + t] += inv * bj[t];
                                gb[j * h + t] += inv * ai[t];
                            }
                        }
                    }
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], &gb);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Side {
    Lhs,
    Rhs,
}

/// Sums an output-shaped gradient down to the shape of the chosen operand.
fn reduce_broadcast(g: &[f64], kind: Broadcast, side: Side, len: usize) -> Vec<f64> {
    match (kind, side) {
        (Broadcast::ScalarLhs, Side::Lhs) | (Broadcast::ScalarRhs, Side::Rhs) => {
            vec![g.iter().sum()]
        }
        (Broadcast::RowRhs, Side::Rhs) => {
            let mut out = vec![0.0; len];
            for (i, v) in g.iter().enumerate() {
                out[i % len] += v;
            }
            out
        }
        _ => g.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn row_norms(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| data[i * cols..(i + 1) * cols].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let max = (0..row.len())
        .filter(|&j| keep(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for j in 0..row.len() {
        if keep(j) {
            row[j] = (row[j] - max).exp();
            total += row[j];
        } else {
            row[j] = 0.0;
        }
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, data: &[f64]) -> Var {
        tape.param(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![0.3; 6]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor::eye(3));
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(i3, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let c = tape.constant(Tensor::vector(vec![2.0, 0.0]));
        let orth = tape.cosine_similarity(a, b).unwrap();
        let colinear = tape.cosine_similarity(c, a).unwrap();
        assert_eq!(tape.value(orth).item(), 0.0);
        assert_eq!(tape.value(colinear).item(), 1.0);
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let zc = tape.cosine_similarity(z, a).unwrap();
        assert_eq!(tape.value(zc).item(), 0.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
        let big = tape.constant(Tensor::vector(vec![800.0]));
        assert!(matches!(tape.exp(big), Err(Error::Domain { op: "exp", .. })));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::zeros(&[3]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 300.0, 299.0, -400.0]).unwrap(),
        );
        let y = tape.softmax_rows(x).unwrap();
        for i in 0..2 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![3.0, 1.0, 5.0, 7.0]).unwrap());
        let y = tape.masked_softmax_rows(x, &[true, false, false, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn row_bias_broadcast() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(Tensor::vector(vec![10.0, 20.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).data(), &[2.0, 2.0]);
    }

    #[test]
    fn f32_tape_rounds_values() {
        let mut tape = Tape::with_precision(Precision::F32);
        let x = tape.constant(Tensor::scalar(0.1));
        assert_eq!(tape.value(x).item(), 0.1f32 as f64);
    }
}
