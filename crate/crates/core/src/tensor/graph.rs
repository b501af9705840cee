//! Recording compute graph with reverse-mode differentiation.
//!
//! One [`Graph`] is built per training step, forward values are stored on
//! the tape, and [`Graph::backward`] walks it in reverse. The primitive set
//! is intentionally small: exactly the operations the encoders, the
//! similarity module and the gating head need.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    Concat(usize),
    Sigmoid,
    Relu,
    Sqrt,
    Log,
    Softmax(usize),
    Sum(Option<usize>),
    Mean(Option<usize>),
    EmbeddingLookup(Vec<usize>),
    LayerNorm { eps: f64 },
    Transpose,
    Slice { axis: usize, start: usize, end: usize },
    MaskedFill { mask: Tensor },
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Tape of recorded primitives; nodes are already in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Interprets a tensor as rows along `axis`: returns (n_groups, group_len,
/// stride within group, stride between groups). Supports rank 1 and 2.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize, usize) {
    match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1, 0),
        (2, 1) => (shape[0], shape[1], 1, shape[1]),
        (2, 0) => (shape[1], shape[0], shape[1], 1),
        _ => panic!("axis {axis} unsupported for shape {shape:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf holding `value`; gradients accumulate on it when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_unary(&self, op: Op, x: Var, value: Tensor) -> Var {
        let needs = self.nodes.borrow()[x.0].needs_grad;
        self.push(op, vec![x.0], value, needs)
    }

    fn push_binary(&self, op: Op, a: Var, b: Var, value: Tensor) -> Var {
        let nodes = self.nodes.borrow();
        let needs = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        self.push(op, vec![a.0, b.0], value, needs)
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            matmul(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push_binary(Op::Matmul, a, b, out))
    }

    /// Elementwise addition; also accepts `[m,n] + [n]` as row-bias.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() == y.shape() {
                let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
                Tensor::from_vec(x.shape().to_vec(), data)
            } else if x.rank() == 2 && y.rank() == 1 && x.shape()[1] == y.shape()[0] {
                let n = y.shape()[0];
                let mut data = x.data().to_vec();
                for (i, v) in data.iter_mut().enumerate() {
                    *v += y.data()[i % n];
                }
                Tensor::from_vec(x.shape().to_vec(), data)
            } else {
                return Err(shape_err("add", x, y));
            }
        };
        Ok(self.push_binary(Op::Add, a, b, out))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(shape_err("sub", x, y));
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
            Tensor::from_vec(x.shape().to_vec(), data)
        };
        Ok(self.push_binary(Op::Sub, a, b, out))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(shape_err("mul", x, y));
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
            Tensor::from_vec(x.shape().to_vec(), data)
        };
        Ok(self.push_binary(Op::Mul, a, b, out))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(shape_err("div", x, y));
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p / q).collect();
            Tensor::from_vec(x.shape().to_vec(), data)
        };
        Ok(self.push_binary(Op::Div, a, b, out))
    }

    pub fn scalar_mul(&self, c: f64, x: Var) -> Var {
        let out = self.nodes.borrow()[x.0].value.map(|v| c * v);
        self.push_unary(Op::ScalarMul(c), x, out)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let rank = first.rank();
            if axis >= rank.max(1) {
                return Err(Error::InvalidArgument(format!(
                    "concat axis {axis} out of range for rank {rank}"
                )));
            }
            let mut needs = false;
            for p in parts {
                let t = &nodes[p.0].value;
                needs |= nodes[p.0].needs_grad;
                if t.rank() != rank {
                    return Err(shape_err("concat", first, t));
                }
                for d in 0..rank {
                    if d != axis && t.shape()[d] != first.shape()[d] {
                        return Err(shape_err("concat", first, t));
                    }
                }
            }
            let out = match (rank, axis) {
                (1, 0) => {
                    let mut data = Vec::new();
                    for p in parts {
                        data.extend_from_slice(nodes[p.0].value.data());
                    }
                    let n = data.len();
                    Tensor::from_vec(vec![n], data)
                }
                (2, 0) => {
                    let cols = first.shape()[1];
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for p in parts {
                        data.extend_from_slice(nodes[p.0].value.data());
                        rows += nodes[p.0].value.shape()[0];
                    }
                    Tensor::from_vec(vec![rows, cols], data)
                }
                (2, 1) => {
                    let rows = first.shape()[0];
                    let total: usize = parts.iter().map(|p| nodes[p.0].value.shape()[1]).sum();
                    let mut data = vec![0.0; rows * total];
                    let mut off = 0;
                    for p in parts {
                        let t = &nodes[p.0].value;
                        let w = t.shape()[1];
                        for r in 0..rows {
                            data[r * total + off..r * total + off + w]
                                .copy_from_slice(t.row(r));
                        }
                        off += w;
                    }
                    Tensor::from_vec(vec![rows, total], data)
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "concat unsupported for rank {rank} axis {axis}"
                    )))
                }
            };
            (out, needs)
        };
        Ok(self.push(Op::Concat(axis), parts.iter().map(|p| p.0).collect(), out, needs))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.nodes.borrow()[x.0].value.map(sigmoid_scalar);
        self.push_unary(Op::Sigmoid, x, out)
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.nodes.borrow()[x.0].value.map(|v| v.max(0.0));
        self.push_unary(Op::Relu, x, out)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        let out = self.nodes.borrow()[x.0].value.map(f64::sqrt);
        self.push_unary(Op::Sqrt, x, out)
    }

    pub fn log(&self, x: Var) -> Var {
        let out = self.nodes.borrow()[x.0].value.map(f64::ln);
        self.push_unary(Op::Log, x, out)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (groups, len, stride, gstride) = axis_layout(t.shape(), axis);
            let mut data = t.data().to_vec();
            for gi in 0..groups {
                let base = gi * gstride;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(data[base + k * stride]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (data[base + k * stride] - mx).exp();
                    data[base + k * stride] = e;
                    sum += e;
                }
                for k in 0..len {
                    data[base + k * stride] /= sum;
                }
            }
            Tensor::from_vec(t.shape().to_vec(), data)
        };
        self.push_unary(Op::Softmax(axis), x, out)
    }

    pub fn sum(&self, x: Var, axis: Option<usize>) -> Var {
        let out = self.reduce(x, axis, false);
        self.push_unary(Op::Sum(axis), x, out)
    }

    pub fn mean(&self, x: Var, axis: Option<usize>) -> Var {
        let out = self.reduce(x, axis, true);
        self.push_unary(Op::Mean(axis), x, out)
    }

    fn reduce(&self, x: Var, axis: Option<usize>, mean: bool) -> Tensor {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        match axis {
            None => {
                let mut s: f64 = t.data().iter().sum();
                if mean {
                    s /= t.numel() as f64;
                }
                Tensor::scalar(s)
            }
            Some(ax) => {
                let (groups, len, stride, gstride) = axis_layout(t.shape(), ax);
                let mut out = vec![0.0; groups];
                for (gi, o) in out.iter_mut().enumerate() {
                    let base = gi * gstride;
                    for k in 0..len {
                        *o += t.data()[base + k * stride];
                    }
                    if mean {
                        *o /= len as f64;
                    }
                }
                if t.rank() == 1 {
                    Tensor::scalar(out[0])
                } else {
                    Tensor::from_vec(vec![groups], out)
                }
            }
        }
    }

    /// Gather rows of `table` at `ids`; gradient scatter-adds back.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.rank() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "embedding table must be rank 2, got {:?}",
                    t.shape()
                )));
            }
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::InvalidArgument(format!(
                        "embedding id {id} out of range {v}"
                    )));
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::from_vec(vec![ids.len(), d], data)
        };
        Ok(self.push_unary(Op::EmbeddingLookup(ids.to_vec()), table, out))
    }

    /// Row-wise layer normalization: `gamma * (x - mu) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (t, g, b) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let d = t.cols();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(shape_err("layer_norm", t, g));
            }
            let rows = t.rows();
            let mut data = vec![0.0; t.numel()];
            for r in 0..rows {
                let xr = &t.data()[r * d..(r + 1) * d];
                let mu = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for k in 0..d {
                    data[r * d + k] = g.data()[k] * (xr[k] - mu) * rstd + b.data()[k];
                }
            }
            let needs = nodes[x.0].needs_grad || nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad;
            (Tensor::from_vec(t.shape().to_vec(), data), needs)
        };
        Ok(self.push(Op::LayerNorm { eps }, vec![x.0, gamma.0, beta.0], out, needs))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.rank() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "transpose needs rank 2, got {:?}",
                    t.shape()
                )));
            }
            t.transposed()
        };
        Ok(self.push_unary(Op::Transpose, x, out))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if axis >= t.rank() || end > t.shape()[axis] || start > end {
                return Err(Error::InvalidArgument(format!(
                    "slice [{start}, {end}) on axis {axis} invalid for {:?}",
                    t.shape()
                )));
            }
            match (t.rank(), axis) {
                (1, 0) => Tensor::from_vec(vec![end - start], t.data()[start..end].to_vec()),
                (2, 0) => {
                    let c = t.shape()[1];
                    Tensor::from_vec(
                        vec![end - start, c],
                        t.data()[start * c..end * c].to_vec(),
                    )
                }
                (2, 1) => {
                    let rows = t.shape()[0];
                    let w = end - start;
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&t.row(r)[start..end]);
                    }
                    Tensor::from_vec(vec![rows, w], data)
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "slice unsupported for shape {:?}",
                        t.shape()
                    )))
                }
            }
        };
        Ok(self.push_unary(Op::Slice { axis, start, end }, x, out))
    }

    /// Replace entries where `mask != 0` with `value`; gradient is blocked
    /// at the filled positions.
    pub fn masked_fill(&self, x: Var, mask: &Tensor, value: f64) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape() != mask.shape() {
                return Err(shape_err("masked_fill", t, mask));
            }
            let data = t
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&v, &m)| if m != 0.0 { value } else { v })
                .collect();
            Tensor::from_vec(t.shape().to_vec(), data)
        };
        Ok(self.push_unary(Op::MaskedFill { mask: mask.clone() }, x, out))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if shape.iter().product::<usize>() != t.numel() {
                return Err(Error::InvalidArgument(format!(
                    "reshape {:?} -> {:?} changes element count",
                    t.shape(),
                    shape
                )));
            }
            t.clone().reshaped(shape.to_vec())
        };
        Ok(self.push_unary(Op::Reshape, x, out))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        {
            let nodes = self.nodes.borrow();
            if !nodes[loss.0].value.is_scalar() {
                return Err(Error::InvalidArgument(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    nodes[loss.0].value.shape()
                )));
            }
        }
        let seed = {
            let nodes = self.nodes.borrow();
            Tensor::filled(nodes[loss.0].value.shape(), 1.0)
        };
        self.backward_seeded(&[(loss, seed)])
    }

    /// Reverse pass seeded with explicit cotangents; used to stitch a
    /// shared sub-graph to per-user graphs at the batch boundary.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (v, cot) in seeds {
            if cot.shape() != nodes[v.0].value.shape() {
                return Err(Error::Shape {
                    op: "backward_seeded",
                    lhs: cot.shape().to_vec(),
                    rhs: nodes[v.0].value.shape().to_vec(),
                });
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(cot),
                slot => *slot = Some(cot.clone()),
            }
        }

        for i in (0..n).rev() {
            let Some(d) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(d);
                continue;
            }
            let mut contribs: Vec<(usize, Tensor)> = Vec::new();
            self.vjp(&nodes, node, i, &d, &mut contribs)?;
            for (target, c) in contribs {
                if !nodes[target].needs_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(g) => g.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(
        &self,
        nodes: &[Node],
        node: &Node,
        idx: usize,
        d: &Tensor,
        out: &mut Vec<(usize, Tensor)>,
    ) -> Result<()> {
        let input = |k: usize| &nodes[node.inputs[k]].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (input(0), input(1));
                out.push((node.inputs[0], matmul(d, &b.transposed())?));
                out.push((node.inputs[1], matmul(&a.transposed(), d)?));
            }
            Op::Add => {
                let (a, b) = (input(0), input(1));
                out.push((node.inputs[0], d.clone()));
                if a.shape() == b.shape() {
                    out.push((node.inputs[1], d.clone()));
                } else {
                    // [m,n] + [n] bias: reduce over rows.
                    let n = b.shape()[0];
                    let mut g = vec![0.0; n];
                    for (i, v) in d.data().iter().enumerate() {
                        g[i % n] += v;
                    }
                    out.push((node.inputs[1], Tensor::from_vec(vec![n], g)));
                }
            }
            Op::Sub => {
                out.push((node.inputs[0], d.clone()));
                out.push((node.inputs[1], d.map(|v| -v)));
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                out.push((node.inputs[0], elementwise(d, b, |x, y| x * y)));
                out.push((node.inputs[1], elementwise(d, a, |x, y| x * y)));
            }
            Op::Div => {
                let (a, b) = (input(0), input(1));
                out.push((node.inputs[0], elementwise(d, b, |x, y| x / y)));
                let mut g = d.clone();
                for ((gv, &av), &bv) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *gv = -*gv * av / (bv * bv);
                }
                out.push((node.inputs[1], g));
            }
            Op::ScalarMul(c) => {
                out.push((node.inputs[0], d.map(|v| c * v)));
            }
            Op::Concat(axis) => {
                let mut start = 0;
                for &inp in &node.inputs {
                    let w = nodes[inp].value.shape()[*axis];
                    let piece = slice_tensor(d, *axis, start, start + w);
                    out.push((inp, piece));
                    start += w;
                }
            }
            Op::Sigmoid => {
                let y = &node.value;
                let _ = idx;
                out.push((
                    node.inputs[0],
                    elementwise(d, y, |dv, yv| dv * yv * (1.0 - yv)),
                ));
            }
            Op::Relu => {
                let x = input(0);
                out.push((
                    node.inputs[0],
                    elementwise(d, x, |dv, xv| if xv > 0.0 { dv } else { 0.0 }),
                ));
            }
            Op::Sqrt => {
                let y = &node.value;
                out.push((node.inputs[0], elementwise(d, y, |dv, yv| dv * 0.5 / yv)));
            }
            Op::Log => {
                let x = input(0);
                out.push((node.inputs[0], elementwise(d, x, |dv, xv| dv / xv)));
            }
            Op::Softmax(axis) => {
                let y = &node.value;
                let (groups, len, stride, gstride) = axis_layout(y.shape(), *axis);
                let mut g = vec![0.0; y.numel()];
                for gi in 0..groups {
                    let base = gi * gstride;
                    let mut dot = 0.0;
                    for k in 0..len {
                        dot += d.data()[base + k * stride] * y.data()[base + k * stride];
                    }
                    for k in 0..len {
                        let p = base + k * stride;
                        g[p] = y.data()[p] * (d.data()[p] - dot);
                    }
                }
                out.push((node.inputs[0], Tensor::from_vec(y.shape().to_vec(), g)));
            }
            Op::Sum(axis) => {
                let x = input(0);
                out.push((node.inputs[0], broadcast_reduce_grad(d, x, *axis, 1.0)));
            }
            Op::Mean(axis) => {
                let x = input(0);
                let scale = match axis {
                    None => 1.0 / x.numel() as f64,
                    Some(ax) => {
                        let (_, len, _, _) = axis_layout(x.shape(), *ax);
                        1.0 / len as f64
                    }
                };
                out.push((node.inputs[0], broadcast_reduce_grad(d, x, *axis, scale)));
            }
            Op::EmbeddingLookup(ids) => {
                let table = input(0);
                let dcols = table.cols();
                let mut g = Tensor::zeros(table.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &d.data()[r * dcols..(r + 1) * dcols];
                    let dst = &mut g.data_mut()[id * dcols..(id + 1) * dcols];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
                out.push((node.inputs[0], g));
            }
            Op::LayerNorm { eps } => {
                let (x, gamma) = (input(0), input(1));
                let dcols = x.cols();
                let rows = x.rows();
                let mut dx = vec![0.0; x.numel()];
                let mut dgamma = vec![0.0; dcols];
                let mut dbeta = vec![0.0; dcols];
                for r in 0..rows {
                    let xr = &x.data()[r * dcols..(r + 1) * dcols];
                    let dr = &d.data()[r * dcols..(r + 1) * dcols];
                    let mu = xr.iter().sum::<f64>() / dcols as f64;
                    let var =
                        xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dcols as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * rstd).collect();
                    let dyg: Vec<f64> = dr
                        .iter()
                        .zip(gamma.data())
                        .map(|(dv, gv)| dv * gv)
                        .collect();
                    let m1 = dyg.iter().sum::<f64>() / dcols as f64;
                    let m2 = dyg
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / dcols as f64;
                    for k in 0..dcols {
                        dx[r * dcols + k] = rstd * (dyg[k] - m1 - xhat[k] * m2);
                        dgamma[k] += dr[k] * xhat[k];
                        dbeta[k] += dr[k];
                    }
                }
                out.push((node.inputs[0], Tensor::from_vec(x.shape().to_vec(), dx)));
                out.push((node.inputs[1], Tensor::from_vec(vec![dcols], dgamma)));
                out.push((node.inputs[2], Tensor::from_vec(vec![dcols], dbeta)));
            }
            Op::Transpose => {
                out.push((node.inputs[0], d.transposed()));
            }
            Op::Slice { axis, start, end } => {
                let x = input(0);
                let mut g = Tensor::zeros(x.shape());
                scatter_slice(&mut g, d, *axis, *start, *end);
                out.push((node.inputs[0], g));
            }
            Op::MaskedFill { mask } => {
                out.push((
                    node.inputs[0],
                    elementwise(d, mask, |dv, m| if m != 0.0 { 0.0 } else { dv }),
                ));
            }
            Op::Reshape => {
                let x = input(0);
                out.push((
                    node.inputs[0],
                    d.clone().reshaped(x.shape().to_vec()),
                ));
            }
        }
        Ok(())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

fn slice_tensor(t: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    match (t.rank(), axis) {
        (1, 0) => Tensor::from_vec(vec![end - start], t.data()[start..end].to_vec()),
        (2, 0) => {
            let c = t.shape()[1];
            Tensor::from_vec(vec![end - start, c], t.data()[start * c..end * c].to_vec())
        }
        (2, 1) => {
            let rows = t.shape()[0];
            let w = end - start;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::from_vec(vec![rows, w], data)
        }
        _ => panic!("slice_tensor unsupported"),
    }
}

fn scatter_slice(g: &mut Tensor, d: &Tensor, axis: usize, start: usize, end: usize) {
    match (g.rank(), axis) {
        (1, 0) => {
            g.data_mut()[start..end].copy_from_slice(d.data());
        }
        (2, 0) => {
            let c = g.shape()[1];
            g.data_mut()[start * c..end * c].copy_from_slice(d.data());
        }
        (2, 1) => {
            let rows = g.shape()[0];
            let c = g.shape()[1];
            let w = end - start;
            for r in 0..rows {
                g.data_mut()[r * c + start..r * c + end].copy_from_slice(&d.data()[r * w..(r + 1) * w]);
            }
        }
        _ => panic!("scatter_slice unsupported"),
    }
}

/// Expand the gradient of a reduction back to the input shape.
fn broadcast_reduce_grad(d: &Tensor, x: &Tensor, axis: Option<usize>, scale: f64) -> Tensor {
    match axis {
        None => Tensor::filled(x.shape(), d.item() * scale),
        Some(ax) => {
            let (groups, len, stride, gstride) = axis_layout(x.shape(), ax);
            let mut g = vec![0.0; x.numel()];
            let dd = d.data();
            for gi in 0..groups {
                let base = gi * gstride;
                let dv = if dd.len() == 1 { dd[0] } else { dd[gi] };
                for k in 0..len {
                    g[base + k * stride] = dv * scale;
                }
            }
            Tensor::from_vec(x.shape().to_vec(), g)
        }
    }
}

// ---- gradient checking ----------------------------------------------------

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

const FD_STEP: f64 = 1e-5;

/// Differences below this are inside the resolution of central differences
/// themselves (roundoff of the two function evaluations divided by 2h) and
/// count as agreement; genuine gradient bugs produce differences orders of
/// magnitude above it.
const FD_RESOLUTION: f64 = 1e-7;

/// Compare the analytic gradient of a scalar-valued `f` at `x` against
/// central finite differences.
pub fn grad_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&g, xv)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::InvalidArgument(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    let grads = g.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    compare_to_fd(&f, x, &analytic, tol)
}

/// The comparison half of [`grad_check`], exposed so a deliberately wrong
/// analytic gradient can be shown to fail.
pub fn compare_to_fd<F>(f: &F, x: &Tensor, analytic: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let eval = |pt: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let xv = g.leaf(pt.clone(), false);
        let loss = f(&g, xv)?;
        Ok(g.value(loss).item())
    };
    let mut max_rel = 0.0;
    let mut worst = 0;
    for k in 0..x.numel() {
        let mut hi = x.clone();
        hi.data_mut()[k] += FD_STEP;
        let mut lo = x.clone();
        lo.data_mut()[k] -= FD_STEP;
        let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * FD_STEP);
        let a = analytic.data()[k];
        let diff = (a - numeric).abs();
        let rel = if diff < FD_RESOLUTION {
            0.0
        } else {
            diff / a.abs().max(numeric.abs()).max(1e-6)
        };
        if rel > max_rel {
            max_rel = rel;
            worst = k;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_index: worst,
        pass: max_rel <= tol,
    })
}
