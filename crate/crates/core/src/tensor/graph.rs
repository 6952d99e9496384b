//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the
//! tape is always in topological order and the backward pass is a single
//! reverse sweep.

use super::array::{broadcast_shapes, Broadcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations exposed through [`Graph::apply_elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Softplus,
    Atan,
    Square,
    Sqrt,
    Negate,
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divides by N).
    Variance,
    /// Square root of the population variance.
    Std,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Relu,
    Softplus,
    Atan,
    Square,
    Sqrt,
    Negate,
    Affine { scale: f64, shift: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary),
    Binary(Binary),
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    /// `x · W + b` over rows of a 2-D `x`.
    Linear { rows: usize, k: usize, n: usize },
    Reduce {
        op: ReduceOp,
        outer: usize,
        len: usize,
        inner: usize,
    },
    /// `out[i] = in[map[i]]`; backs sorting, gathering and permutations.
    Gather { map: Vec<usize> },
    Reshape,
    ConcatLast { widths: Vec<usize> },
    SoftmaxLast { width: usize },
    PairwiseDistance { n: usize, m: usize, d: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    /// Elementwise evaluation with the dispatch hoisted out of the loop.
    fn apply(self, x: &Tensor) -> Tensor {
        macro_rules! each {
            ($f:expr) => {
                x.map($f)
            };
        }
        match self {
            Unary::Exp => each!(f64::exp),
            Unary::Log => each!(f64::ln),
            Unary::Sigmoid => each!(sigmoid),
            Unary::Relu => each!(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Softplus => each!(softplus),
            Unary::Atan => each!(f64::atan),
            Unary::Square => each!(|v| v * v),
            Unary::Sqrt => each!(f64::sqrt),
            Unary::Negate => each!(|v| -v),
            Unary::Affine { scale, shift } => each!(|v| scale * v + shift),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::Square => 2.0 * x,
            // subgradient 0 at the origin
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Negate => -1.0,
            Unary::Affine { scale, .. } => scale,
        }
    }
}

/// `f(a[i'], b[i''])` over a broadcast output of `n` elements, with tight
/// loops for the patterns the engine produces most.
fn zip_broadcast(
    va: &[f64],
    ba: &Broadcast,
    vb: &[f64],
    bb: &Broadcast,
    n: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match (ba, bb) {
        (Broadcast::Same, Broadcast::Same) => {
            out.extend(va.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        (Broadcast::Same, Broadcast::Cycle(w)) => {
            for row in va.chunks(*w) {
                out.extend(row.iter().zip(vb).map(|(&x, &y)| f(x, y)));
            }
        }
        (Broadcast::Cycle(w), Broadcast::Same) => {
            for row in vb.chunks(*w) {
                out.extend(va.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
        }
        (Broadcast::Same, Broadcast::Repeat(r)) => {
            for (row, &y) in va.chunks(*r).zip(vb) {
                out.extend(row.iter().map(|&x| f(x, y)));
            }
        }
        (Broadcast::Repeat(r), Broadcast::Same) => {
            for (row, &x) in vb.chunks(*r).zip(va) {
                out.extend(row.iter().map(|&y| f(x, y)));
            }
        }
        (Broadcast::Repeat(r), Broadcast::Cycle(w)) if r == w => {
            for &x in va {
                out.extend(vb.iter().map(|&y| f(x, y)));
            }
        }
        (Broadcast::Cycle(w), Broadcast::Repeat(r)) if r == w => {
            for &y in vb {
                out.extend(va.iter().map(|&x| f(x, y)));
            }
        }
        _ => out.extend((0..n).map(|i| f(va[ba.index(i)], vb[bb.index(i)]))),
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn apply_elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::shape(format!(
                "{op:?} takes {} operand(s), got {}",
                op.arity(),
                inputs.len()
            )));
        }
        let x = inputs[0];
        match op {
            Elementwise::Add => self.binary(Binary::Add, x, inputs[1]),
            Elementwise::Sub => self.binary(Binary::Sub, x, inputs[1]),
            Elementwise::Mul => self.binary(Binary::Mul, x, inputs[1]),
            Elementwise::Div => self.binary(Binary::Div, x, inputs[1]),
            Elementwise::Exp => Ok(self.unary(Unary::Exp, x)),
            Elementwise::Log => self.log(x),
            Elementwise::Sigmoid => Ok(self.unary(Unary::Sigmoid, x)),
            Elementwise::Relu => Ok(self.unary(Unary::Relu, x)),
            Elementwise::Softplus => Ok(self.unary(Unary::Softplus, x)),
            Elementwise::Atan => Ok(self.unary(Unary::Atan, x)),
            Elementwise::Square => Ok(self.unary(Unary::Square, x)),
            Elementwise::Sqrt => self.sqrt(x),
            Elementwise::Negate => Ok(self.unary(Unary::Negate, x)),
        }
    }

    fn unary(&mut self, op: Unary, x: Var) -> Var {
        let value = op.apply(self.value(x));
        self.push(Op::Unary(op), vec![x.0], value)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let (ba, bb) = (Broadcast::new(&sa, &out_shape), Broadcast::new(&sb, &out_shape));
        let data = match op {
            Binary::Add => zip_broadcast(va, &ba, vb, &bb, n, |x, y| x + y),
            Binary::Sub => zip_broadcast(va, &ba, vb, &bb, n, |x, y| x - y),
            Binary::Mul => zip_broadcast(va, &ba, vb, &bb, n, |x, y| x * y),
            Binary::Div => zip_broadcast(va, &ba, vb, &bb, n, |x, y| x / y),
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Binary(op), vec![a.0, b.0], value))
    }

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

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v < 0.0 || v.is_nan()) {
            return Err(Error::domain("log", 0, format!("input value {bad}")));
        }
        Ok(self.unary(Unary::Log, x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v < 0.0 || v.is_nan()) {
            return Err(Error::domain("sqrt", 0, format!("input value {bad}")));
        }
        Ok(self.unary(Unary::Sqrt, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(Unary::Atan, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Negate, x)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(Unary::Affine { scale, shift }, x)
    }

    /// Matrix product over the last two axes. `b` is either 2-D (shared by
    /// every batch entry of `a`) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs at least 2-D operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            )));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(Error::shape(format!(
                "matmul batch axes differ: {sa:?} x {sb:?}"
            )));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let va = self.value(a).data();
            let vb = self.value(b).data();
            if shared_rhs {
                gemm(batch * m, k, n, va, (k, 1), vb, (n, 1), &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &va[i * m * k..],
                        (k, 1),
                        &vb[i * k * n..],
                        (n, 1),
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            Op::MatMul {
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            vec![a.0, b.0],
            value,
        ))
    }

    /// Fused dense layer `x · W + b` for `x: [rows, k]`, `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::shape(format!(
                "linear needs [r,k] x [k,n] + [n], got {sx:?}, {sw:?}, {sb:?}"
            )));
        }
        let (rows, k, n) = (sx[0], sx[1], sw[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            rows,
            k,
            n,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (n, 1),
            &mut out,
            true,
        );
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(Op::Linear { rows, k, n }, vec![x.0, w.0, b.0], value))
    }

    /// Reduce along `axis`, removing it from the shape.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "reduction axis {axis} out of range for {shape:?}"
            )));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(Error::domain("reduce", 0, "empty reduction axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| v[(o * len + j) * inner + i];
                let sum: f64 = (0..len).map(at).sum();
                let mean = sum / len as f64;
                out[o * inner + i] = match op {
                    ReduceOp::Sum => sum,
                    ReduceOp::Mean => mean,
                    ReduceOp::Variance | ReduceOp::Std => {
                        let var =
                            (0..len).map(|j| (at(j) - mean).powi(2)).sum::<f64>() / len as f64;
                        if op == ReduceOp::Std {
                            var.sqrt()
                        } else {
                            var
                        }
                    }
                };
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            Op::Reduce {
                op,
                outer,
                len,
                inner,
            },
            vec![x.0],
            value,
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axis)
    }

    pub fn variance(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Variance, x, axis)
    }

    pub fn std(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Std, x, axis)
    }

    /// Mean over the last axis, keeping it with size 1.
    pub fn mean_keep_last(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let axis = shape
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::shape("mean of a scalar"))?;
        let m = self.mean(x, axis)?;
        shape[axis] = 1;
        self.reshape(m, &shape)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x.0], value))
    }

    /// Ascending sort along the last axis. Returns the sorted values and, for
    /// each row, the source index of every sorted position. The backward pass
    /// routes gradients through this frozen permutation; ties keep their
    /// original order.
    pub fn sort_last(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let value = self.value(x);
        if value.ndim() == 0 {
            return Err(Error::shape("cannot sort a scalar"));
        }
        if value.data().iter().any(|v| v.is_nan()) {
            return Err(Error::domain("sort", 0, "NaN in input"));
        }
        let width = *value.shape().last().unwrap();
        let rows = if width == 0 { 0 } else { value.numel() / width };
        let data = value.data();
        let mut perm = Vec::with_capacity(value.numel());
        let mut map = Vec::with_capacity(value.numel());
        let mut idx: Vec<usize> = Vec::with_capacity(width);
        for r in 0..rows {
            let row = &data[r * width..(r + 1) * width];
            idx.clear();
            idx.extend(0..width);
            idx.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
            perm.extend_from_slice(&idx);
            map.extend(idx.iter().map(|&i| r * width + i));
        }
        let out = self.gather(x, map, value.shape().to_vec())?;
        Ok((out, perm))
    }

    /// Select entries of the last axis by index (repeats allowed).
    pub fn gather_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::shape("gather on a scalar"))?;
        if let Some(bad) = indices.iter().find(|&&i| i >= width) {
            return Err(Error::shape(format!(
                "index {bad} out of range for last axis of size {width}"
            )));
        }
        let rows = if width == 0 { 0 } else { self.value(x).numel() / width };
        let mut map = Vec::with_capacity(rows * indices.len());
        for r in 0..rows {
            map.extend(indices.iter().map(|&i| r * width + i));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = indices.len();
        self.gather(x, map, out_shape)
    }

    fn gather(&mut self, x: Var, map: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Gather { map }, vec![x.0], value))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(Error::shape(format!(
                    "concat_last: leading axes {:?} differ from {lead:?}",
                    s
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::ConcatLast { widths },
            parts.iter().map(|p| p.0).collect(),
            value,
        ))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let width = *value
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax of a scalar"))?;
        if width == 0 {
            return Err(Error::domain("softmax", 0, "empty axis"));
        }
        let mut data = value.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(value.shape().to_vec(), data)?;
        Ok(self.push(Op::SoftmaxLast { width }, vec![x.0], value))
    }

    /// Euclidean distances between rows: `x` is `[n, d]`, `y` is `[m, d]`,
    /// the result is `[n, m]`. The gradient at coincident points is 0.
    pub fn pairwise_distance(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
            return Err(Error::shape(format!(
                "pairwise_distance needs [n,d] and [m,d], got {sx:?} and {sy:?}"
            )));
        }
        let (n, m, d) = (sx[0], sy[0], sx[1]);
        let (vx, vy) = (self.value(x).data(), self.value(y).data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let xi = &vx[i * d..(i + 1) * d];
            for j in 0..m {
                let yj = &vy[j * d..(j + 1) * d];
                let sq: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                out.push(sq.sqrt());
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::PairwiseDistance { n, m, d }, vec![x.0, y.0], value))
    }

    /// Accumulate d(output)/d(leaf) into every trainable leaf. Repeated calls
    /// add to the stored gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (slot, contrib) in self.local_backward(id, &g) {
                if !self.nodes[slot].requires_grad {
                    continue;
                }
                match &mut grads[slot] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    empty => *empty = Some(contrib),
                }
            }
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let acc = node.grad.get_or_insert_with(|| Tensor::zeros(&shape));
            if let Some(Some(g)) = grads.get(id) {
                acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `id` to each of its inputs.
    fn local_backward(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        let inputs = &node.inputs;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(op) => {
                let x = self.nodes[inputs[0]].value.data();
                let d = match *op {
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Unary::Affine { scale, .. } => g.iter().map(|g| g * scale).collect(),
                    Unary::Negate => g.iter().map(|g| -g).collect(),
                    Unary::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    op => g
                        .iter()
                        .zip(x.iter().zip(out))
                        .map(|(g, (&x, &y))| g * op.deriv(x, y))
                        .collect(),
                };
                vec![(inputs[0], d)]
            }
            Op::Binary(op) => {
                let (a, b) = (&self.nodes[inputs[0]].value, &self.nodes[inputs[1]].value);
                let out_shape = node.value.shape();
                let (va, vb) = (a.data(), b.data());
                let mut out = Vec::with_capacity(2);
                for (slot, (this, other)) in [(a, b), (b, a)].into_iter().enumerate() {
                    if !self.nodes[inputs[slot]].requires_grad {
                        continue;
                    }
                    let bt = Broadcast::new(this.shape(), out_shape);
                    let d: Vec<f64> = match (op, slot) {
                        (Binary::Add, _) | (Binary::Sub, 0) => g.to_vec(),
                        (Binary::Sub, _) => g.iter().map(|v| -v).collect(),
                        (Binary::Mul, _) => {
                            let bo = Broadcast::new(other.shape(), out_shape);
                            zip_broadcast(g, &Broadcast::Same, other.data(), &bo, g.len(), |g, o| g * o)
                        }
                        (Binary::Div, _) => {
                            let (ia, ib) = (Broadcast::new(a.shape(), out_shape), Broadcast::new(b.shape(), out_shape));
                            g.iter()
                                .enumerate()
                                .map(|(i, g)| {
                                    let y = vb[ib.index(i)];
                                    if slot == 0 {
                                        g / y
                                    } else {
                                        -g * va[ia.index(i)] / (y * y)
                                    }
                                })
                                .collect()
                        }
                    };
                    out.push((inputs[slot], bt.reduce(d, this.numel())));
                }
                out
            }
            &Op::MatMul {
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let va = self.nodes[inputs[0]].value.data();
                let vb = self.nodes[inputs[1]].value.data();
                let need_a = self.nodes[inputs[0]].requires_grad;
                let need_b = self.nodes[inputs[1]].requires_grad;
                let mut ga = vec![0.0; if need_a { batch * m * k } else { 0 }];
                let mut gb = vec![0.0; if need_b { self.nodes[inputs[1]].value.numel() } else { 0 }];
                if shared_rhs {
                    let rows = batch * m;
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    if need_a {
                        gemm(rows, n, k, g, (n, 1), vb, (1, n), &mut ga, false);
                    }
                    if need_b {
                        gemm(k, rows, n, va, (1, k), g, (n, 1), &mut gb, false);
                    }
                } else {
                    ga.resize(batch * m * k, 0.0);
                    gb.resize(self.nodes[inputs[1]].value.numel(), 0.0);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            (n, 1),
                            &vb[i * k * n..],
                            (1, n),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                        gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..],
                            (1, k),
                            gi,
                            (n, 1),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                }
                let mut out = Vec::with_capacity(2);
                if need_a {
                    out.push((inputs[0], ga));
                }
                if need_b {
                    out.push((inputs[1], gb));
                }
                out
            }
            &Op::Linear { rows, k, n } => {
                let vx = self.nodes[inputs[0]].value.data();
                let vw = self.nodes[inputs[1]].value.data();
                let mut out = Vec::with_capacity(3);
                if self.nodes[inputs[0]].requires_grad {
                    let mut gx = vec![0.0; rows * k];
                    gemm(rows, n, k, g, (n, 1), vw, (1, n), &mut gx, false);
                    out.push((inputs[0], gx));
                }
                if self.nodes[inputs[1]].requires_grad {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, rows, n, vx, (1, k), g, (n, 1), &mut gw, false);
                    out.push((inputs[1], gw));
                }
                if self.nodes[inputs[2]].requires_grad {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((inputs[2], gb));
                }
                out
            }
            &Op::Reduce {
                op,
                outer,
                len,
                inner,
            } => {
                let x = self.nodes[inputs[0]].value.data();
                let mut dx = vec![0.0; x.len()];
                let nf = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        let at = |j: usize| (o * len + j) * inner + i;
                        match op {
                            ReduceOp::Sum => (0..len).for_each(|j| dx[at(j)] = gi),
                            ReduceOp::Mean => (0..len).for_each(|j| dx[at(j)] = gi / nf),
                            ReduceOp::Variance | ReduceOp::Std => {
                                let mean = (0..len).map(|j| x[at(j)]).sum::<f64>() / nf;
                                let scale = if op == ReduceOp::Variance {
                                    2.0 / nf
                                } else {
                                    let sd = out[o * inner + i];
                                    if sd > 0.0 {
                                        1.0 / (nf * sd)
                                    } else {
                                        0.0
                                    }
                                };
                                for j in 0..len {
                                    dx[at(j)] = gi * scale * (x[at(j)] - mean);
                                }
                            }
                        }
                    }
                }
                vec![(inputs[0], dx)]
            }
            Op::Gather { map } => {
                let mut dx = vec![0.0; self.nodes[inputs[0]].value.numel()];
                for (&src, &gv) in map.iter().zip(g) {
                    dx[src] += gv;
                }
                vec![(inputs[0], dx)]
            }
            Op::Reshape => vec![(inputs[0], g.to_vec())],
            Op::ConcatLast { widths } => {
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut parts: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut offset = r * total;
                    for (part, &w) in parts.iter_mut().zip(widths) {
                        part.extend_from_slice(&g[offset..offset + w]);
                        offset += w;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            &Op::SoftmaxLast { width } => {
                let mut dx = vec![0.0; g.len()];
                for ((dx, y), g) in dx
                    .chunks_mut(width)
                    .zip(out.chunks(width))
                    .zip(g.chunks(width))
                {
                    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    for j in 0..width {
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![(inputs[0], dx)]
            }
            &Op::PairwiseDistance { n, m, d } => {
                let vx = self.nodes[inputs[0]].value.data();
                let vy = self.nodes[inputs[1]].value.data();
                let mut gx = vec![0.0; n * d];
                let mut gy = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let dist = out[i * m + j];
                        if dist == 0.0 {
                            continue;
                        }
                        let w = g[i * m + j] / dist;
                        for c in 0..d {
                            let diff = vx[i * d + c] - vy[j * d + c];
                            gx[i * d + c] += w * diff;
                            gy[j * d + c] -= w * diff;
                        }
                    }
                }
                vec![(inputs[0], gx), (inputs[1], gy)]
            }
        }
    }
}

/// `c (+)= a · b` for an `m×k` by `k×n` product with arbitrary strides.
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
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= reach(m, k, a_strides));
    assert!(b.len() >= reach(k, n, b_strides));
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the kernel touches.
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
