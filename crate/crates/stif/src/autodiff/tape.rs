//! Define-by-run reverse-mode differentiation tape.
//!
//! A [`Tape`] records primitive applications as they execute. Nodes are
//! appended in topological order, so [`Tape::backward`] is a single reverse
//! sweep that accumulates adjoints; a value used by several consumers sums
//! their contributions. Tapes are rebuilt per training step and consumed by
//! `backward`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(usize);

/// The primitive vocabulary accepted by [`Tape::apply`].
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    /// Adds a vector to every row of a matrix.
    BroadcastAdd,
    Relu,
    Softplus,
    Sigmoid,
    Sin,
    Cos,
    Exp,
    Neg,
    Reciprocal,
    /// Full reduction to a scalar.
    Sum,
    /// Full mean reduction to a scalar.
    Mean,
    Square,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::BroadcastAdd => "broadcast_add",
            Primitive::Relu => "relu",
            Primitive::Softplus => "softplus",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Exp => "exp",
            Primitive::Neg => "neg",
            Primitive::Reciprocal => "reciprocal",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Square => "square",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
        }
    }
}

/// Activation applied by the fused dense operation.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // sigma(pre) = 1 - exp(-softplus(pre))
            Activation::Softplus => 1.0 - (-y).exp(),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

enum Op {
    Leaf,
    Unary(Primitive, usize),
    Binary(Primitive, usize, usize),
    Concat { axis: usize, inputs: Vec<usize> },
    Slice { axis: usize, start: usize, input: usize },
    /// Metadata-only shape change; values are shared layout.
    Reshape(usize),
    /// Fused `act(input · w + bias)`; one node per MLP layer keeps tape
    /// traffic proportional to the layer output, not to every intermediate.
    Dense { input: usize, w: usize, b: usize, act: Activation },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Records a forward pass and differentiates it.
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), adjoints: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a differentiable or constant leaf, copying the tensor's values.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Value> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, v: f64) -> Value {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Scalar convenience accessor.
    pub fn scalar_value(&self, v: Value) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Adjoint of a node after [`Tape::backward`]; `None` when no gradient
    /// reached it (or it did not require one).
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Value {
        self.nodes.push(Node { op, shape, values, requires_grad });
        Value(self.nodes.len() - 1)
    }

    fn check_live(&self, primitive: &'static str) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(format!("{primitive}: tape already consumed by backward")));
        }
        Ok(())
    }

    /// Applies a named primitive. Records the node for differentiation when
    /// any input requires a gradient.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Value]) -> Result<Value> {
        self.check_live(prim.name())?;
        let arity_err = |want: &str| {
            Err(Error::Shape {
                primitive: prim.name(),
                detail: format!("expected {want} input(s), got {}", inputs.len()),
            })
        };
        match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let [a, b] = inputs else { return arity_err("2") };
                self.elementwise_binary(prim, *a, *b)
            }
            Primitive::MatMul => {
                let [a, b] = inputs else { return arity_err("2") };
                self.matmul_impl(*a, *b)
            }
            Primitive::BroadcastAdd => {
                let [a, b] = inputs else { return arity_err("2") };
                self.broadcast_add_impl(*a, *b)
            }
            Primitive::Relu
            | Primitive::Softplus
            | Primitive::Sigmoid
            | Primitive::Sin
            | Primitive::Cos
            | Primitive::Exp
            | Primitive::Neg
            | Primitive::Reciprocal
            | Primitive::Square => {
                let [a] = inputs else { return arity_err("1") };
                self.elementwise_unary(prim, *a)
            }
            Primitive::Sum | Primitive::Mean => {
                let [a] = inputs else { return arity_err("1") };
                self.reduce_impl(prim, *a)
            }
            Primitive::Concat { axis } => self.concat_impl(axis, inputs),
            Primitive::Slice { axis, start, end } => {
                let [a] = inputs else { return arity_err("1") };
                self.slice_impl(*a, axis, start, end)
            }
        }
    }

    // ── Convenience wrappers ─────────────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn broadcast_add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.apply(Primitive::BroadcastAdd, &[a, b])
    }
    pub fn relu(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn softplus(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn sin(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Sin, &[a])
    }
    pub fn cos(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Cos, &[a])
    }
    pub fn exp(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn neg(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Neg, &[a])
    }
    pub fn reciprocal(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Reciprocal, &[a])
    }
    pub fn sum(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn square(&mut self, a: Value) -> Result<Value> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn concat(&mut self, axis: usize, parts: &[Value]) -> Result<Value> {
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Value, axis: usize, start: usize, end: usize) -> Result<Value> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    /// Multiplies a scalar node by a plain constant.
    pub fn scale(&mut self, a: Value, factor: f64) -> Result<Value> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    /// Fused dense layer `act(input · w + b)` for `input [m,k]`, `w [k,n]`,
    /// `b [n]`. Equivalent to matmul + broadcast_add + activation but
    /// recorded as a single node.
    pub fn dense(&mut self, input: Value, w: Value, b: Value, act: Activation) -> Result<Value> {
        self.check_live("dense")?;
        let (ni, nw, nb) = (&self.nodes[input.0], &self.nodes[w.0], &self.nodes[b.0]);
        let ([m, k], [k2, n]) = (dims2(&ni.shape), dims2(&nw.shape));
        if ni.shape.len() != 2 || nw.shape.len() != 2 || k != k2 || nb.shape != [n] {
            return Err(Error::Shape {
                primitive: "dense",
                detail: format!("{:?} x {:?} + {:?}", ni.shape, nw.shape, nb.shape),
            });
        }
        let mut values = vec![0.0; m * n];
        for row in values.chunks_exact_mut(n) {
            row.copy_from_slice(&nb.values);
        }
        mm_accum(&ni.values, &nw.values, m, k, n, &mut values);
        for v in values.iter_mut() {
            *v = act.apply(*v);
        }
        let rg = ni.requires_grad || nw.requires_grad || nb.requires_grad;
        Ok(self.push(Op::Dense { input: input.0, w: w.0, b: b.0, act }, vec![m, n], values, rg))
    }

    /// Metadata-only shape change; element count must be preserved.
    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        self.check_live("reshape")?;
        let node = &self.nodes[a.0];
        let new_numel: usize = shape.iter().product();
        if new_numel != node.values.len() {
            return Err(Error::Shape {
                primitive: "reshape",
                detail: format!("{:?} -> {:?} changes element count", node.shape, shape),
            });
        }
        let values = node.values.clone();
        let rg = node.requires_grad;
        Ok(self.push(Op::Reshape(a.0), shape, values, rg))
    }

    // ── Primitive implementations ────────────────────────────────────

    fn elementwise_binary(&mut self, prim: Primitive, a: Value, b: Value) -> Result<Value> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::Shape {
                primitive: prim.name(),
                detail: format!("{:?} vs {:?}", na.shape, nb.shape),
            });
        }
        let values: Vec<f64> = match prim {
            Primitive::Add => na.values.iter().zip(&nb.values).map(|(x, y)| x + y).collect(),
            Primitive::Sub => na.values.iter().zip(&nb.values).map(|(x, y)| x - y).collect(),
            Primitive::Mul => na.values.iter().zip(&nb.values).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(Op::Binary(prim, a.0, b.0), shape, values, rg))
    }

    fn elementwise_unary(&mut self, prim: Primitive, a: Value) -> Result<Value> {
        let na = &self.nodes[a.0];
        let values: Vec<f64> = match prim {
            Primitive::Relu => na.values.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            Primitive::Softplus => na.values.iter().map(|&x| softplus(x)).collect(),
            Primitive::Sigmoid => na.values.iter().map(|&x| sigmoid(x)).collect(),
            Primitive::Sin => na.values.iter().map(|&x| x.sin()).collect(),
            Primitive::Cos => na.values.iter().map(|&x| x.cos()).collect(),
            Primitive::Exp => na.values.iter().map(|&x| x.exp()).collect(),
            Primitive::Neg => na.values.iter().map(|&x| -x).collect(),
            Primitive::Reciprocal => na.values.iter().map(|&x| 1.0 / x).collect(),
            Primitive::Square => na.values.iter().map(|&x| x * x).collect(),
            _ => unreachable!(),
        };
        let shape = na.shape.clone();
        let rg = na.requires_grad;
        Ok(self.push(Op::Unary(prim, a.0), shape, values, rg))
    }

    fn matmul_impl(&mut self, a: Value, b: Value) -> Result<Value> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let ([m, k], [k2, n]) = (dims2(&na.shape), dims2(&nb.shape));
        if na.shape.len() != 2 || nb.shape.len() != 2 || k != k2 {
            return Err(Error::Shape {
                primitive: "matmul",
                detail: format!("{:?} x {:?}", na.shape, nb.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_accum(&na.values, &nb.values, m, k, n, &mut out);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(Op::Binary(Primitive::MatMul, a.0, b.0), vec![m, n], out, rg))
    }

    fn broadcast_add_impl(&mut self, a: Value, b: Value) -> Result<Value> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let cols = *na.shape.last().unwrap();
        if nb.shape.len() != 1 || nb.shape[0] != cols {
            return Err(Error::Shape {
                primitive: "broadcast_add",
                detail: format!("{:?} + {:?} (rhs must be 1-d of the lhs's last dim)", na.shape, nb.shape),
            });
        }
        let mut values = na.values.clone();
        for row in values.chunks_exact_mut(cols) {
            for (v, bias) in row.iter_mut().zip(&nb.values) {
                *v += bias;
            }
        }
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(Op::Binary(Primitive::BroadcastAdd, a.0, b.0), shape, values, rg))
    }

    fn reduce_impl(&mut self, prim: Primitive, a: Value) -> Result<Value> {
        let na = &self.nodes[a.0];
        let total: f64 = na.values.iter().sum();
        let value = match prim {
            Primitive::Sum => total,
            Primitive::Mean => total / na.values.len() as f64,
            _ => unreachable!(),
        };
        let rg = na.requires_grad;
        Ok(self.push(Op::Unary(prim, a.0), vec![1], vec![value], rg))
    }

    fn concat_impl(&mut self, axis: usize, inputs: &[Value]) -> Result<Value> {
        if inputs.is_empty() {
            return Err(Error::Shape { primitive: "concat", detail: "no inputs".into() });
        }
        let rank = self.nodes[inputs[0].0].shape.len();
        if axis >= rank {
            return Err(Error::Shape {
                primitive: "concat",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut out_shape = self.nodes[inputs[0].0].shape.clone();
        out_shape[axis] = 0;
        for v in inputs {
            let s = &self.nodes[v.0].shape;
            if s.len() != rank
                || (0..rank).any(|d| d != axis && s[d] != self.nodes[inputs[0].0].shape[d])
            {
                return Err(Error::Shape {
                    primitive: "concat",
                    detail: format!("incompatible part shape {s:?} along axis {axis}"),
                });
            }
            out_shape[axis] += s[axis];
        }
        // Row-major gather: iterate outer blocks, copy each part's slab.
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut values = vec![0.0; out_shape.iter().product()];
        let out_stride = out_shape[axis] * inner;
        let mut offset = 0;
        for v in inputs {
            let node = &self.nodes[v.0];
            let part_stride = node.shape[axis] * inner;
            for o in 0..outer {
                let src = &node.values[o * part_stride..(o + 1) * part_stride];
                values[o * out_stride + offset..o * out_stride + offset + part_stride]
                    .copy_from_slice(src);
            }
            offset += part_stride;
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(Op::Concat { axis, inputs: ids }, out_shape, values, rg))
    }

    fn slice_impl(&mut self, a: Value, axis: usize, start: usize, end: usize) -> Result<Value> {
        let na = &self.nodes[a.0];
        let rank = na.shape.len();
        if axis >= rank || start >= end || end > na.shape[axis] {
            return Err(Error::Shape {
                primitive: "slice",
                detail: format!("range {start}..{end} on axis {axis} of {:?}", na.shape),
            });
        }
        let mut out_shape = na.shape.clone();
        out_shape[axis] = end - start;
        let outer: usize = na.shape[..axis].iter().product();
        let inner: usize = na.shape[axis + 1..].iter().product();
        let in_stride = na.shape[axis] * inner;
        let out_stride = (end - start) * inner;
        let mut values = vec![0.0; outer * out_stride];
        for o in 0..outer {
            let src = &na.values[o * in_stride + start * inner..o * in_stride + end * inner];
            values[o * out_stride..(o + 1) * out_stride].copy_from_slice(src);
        }
        let rg = na.requires_grad;
        Ok(self.push(Op::Slice { axis, start, input: a.0 }, out_shape, values, rg))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulates `d root / d node` into every recorded node that requires a
    /// gradient; read results with [`Tape::grad`]. The root must be a scalar
    /// and the tape is consumed: no further primitives may be applied.
    pub fn backward(&mut self, root: Value) -> Result<()> {
        self.check_live("backward")?;
        if self.nodes[root.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.consumed = true;
        self.adjoints = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(()); // Nothing differentiable reaches the root.
        }
        self.adjoints[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(adj) = self.adjoints[i].take() else { continue };
            self.propagate(i, &adj);
            self.adjoints[i] = Some(adj);
        }
        Ok(())
    }

    fn wants_grad(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Runs `f` over the (lazily created) adjoint buffer of a node while the
    /// rest of the tape stays readable.
    fn with_adjoint<F: FnOnce(&Self, &mut [f64])>(&mut self, idx: usize, f: F) {
        let len = self.nodes[idx].values.len();
        let mut buf = self.adjoints[idx].take().unwrap_or_else(|| vec![0.0; len]);
        f(self, &mut buf);
        self.adjoints[idx] = Some(buf);
    }

    fn propagate(&mut self, i: usize, adj: &[f64]) {
        // Adjoints live in a separate vector, so input values stay readable
        // while a target buffer is taken out for accumulation.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Reshape(a) => {
                let a = *a;
                if self.wants_grad(a) {
                    self.with_adjoint(a, |_, buf| axpy(1.0, adj, buf));
                }
            }
            Op::Unary(prim, a) => {
                let (prim, a) = (*prim, *a);
                if !self.wants_grad(a) {
                    return;
                }
                self.with_adjoint(a, |tape, buf| {
                    let src = &tape.nodes[a].values;
                    let out = &tape.nodes[i].values;
                    match prim {
                        Primitive::Relu => {
                            for ((s, &x), &g) in buf.iter_mut().zip(src).zip(adj) {
                                if x > 0.0 {
                                    *s += g;
                                }
                            }
                        }
                        Primitive::Softplus => {
                            for ((s, &x), &g) in buf.iter_mut().zip(src).zip(adj) {
                                *s += g * sigmoid(x);
                            }
                        }
                        Primitive::Sigmoid => {
                            for ((s, &y), &g) in buf.iter_mut().zip(out).zip(adj) {
                                *s += g * y * (1.0 - y);
                            }
                        }
                        Primitive::Sin => {
                            for ((s, &x), &g) in buf.iter_mut().zip(src).zip(adj) {
                                *s += g * x.cos();
                            }
                        }
                        Primitive::Cos => {
                            for ((s, &x), &g) in buf.iter_mut().zip(src).zip(adj) {
                                *s -= g * x.sin();
                            }
                        }
                        Primitive::Exp => {
                            for ((s, &y), &g) in buf.iter_mut().zip(out).zip(adj) {
                                *s += g * y;
                            }
                        }
                        Primitive::Neg => axpy(-1.0, adj, buf),
                        Primitive::Reciprocal => {
                            for ((s, &y), &g) in buf.iter_mut().zip(out).zip(adj) {
                                *s -= g * y * y;
                            }
                        }
                        Primitive::Square => {
                            for ((s, &x), &g) in buf.iter_mut().zip(src).zip(adj) {
                                *s += 2.0 * g * x;
                            }
                        }
                        Primitive::Sum => {
                            let g = adj[0];
                            for s in buf.iter_mut() {
                                *s += g;
                            }
                        }
                        Primitive::Mean => {
                            let g = adj[0] / src.len() as f64;
                            for s in buf.iter_mut() {
                                *s += g;
                            }
                        }
                        _ => unreachable!(),
                    }
                });
            }
            Op::Binary(prim, a, b) => {
                let (prim, a, b) = (*prim, *a, *b);
                match prim {
                    Primitive::Add => {
                        if self.wants_grad(a) {
                            self.with_adjoint(a, |_, buf| axpy(1.0, adj, buf));
                        }
                        if self.wants_grad(b) {
                            self.with_adjoint(b, |_, buf| axpy(1.0, adj, buf));
                        }
                    }
                    Primitive::Sub => {
                        if self.wants_grad(a) {
                            self.with_adjoint(a, |_, buf| axpy(1.0, adj, buf));
                        }
                        if self.wants_grad(b) {
                            self.with_adjoint(b, |_, buf| axpy(-1.0, adj, buf));
                        }
                    }
                    Primitive::Mul => {
                        if self.wants_grad(a) {
                            self.with_adjoint(a, |tape, buf| {
                                for ((s, &y), &g) in buf.iter_mut().zip(&tape.nodes[b].values).zip(adj) {
                                    *s += g * y;
                                }
                            });
                        }
                        if self.wants_grad(b) {
                            self.with_adjoint(b, |tape, buf| {
                                for ((s, &x), &g) in buf.iter_mut().zip(&tape.nodes[a].values).zip(adj) {
                                    *s += g * x;
                                }
                            });
                        }
                    }
                    Primitive::MatMul => {
                        let [m, k] = dims2(&self.nodes[a].shape);
                        let n = self.nodes[b].shape[1];
                        if self.wants_grad(a) {
                            self.with_adjoint(a, |tape, buf| {
                                mm_nt_accum(adj, &tape.nodes[b].values, m, n, k, buf);
                            });
                        }
                        if self.wants_grad(b) {
                            self.with_adjoint(b, |tape, buf| {
                                mm_tn_accum(&tape.nodes[a].values, adj, m, k, n, buf);
                            });
                        }
                    }
                    Primitive::BroadcastAdd => {
                        if self.wants_grad(a) {
                            self.with_adjoint(a, |_, buf| axpy(1.0, adj, buf));
                        }
                        if self.wants_grad(b) {
                            self.with_adjoint(b, |_, buf| {
                                let cols = buf.len();
                                for row in adj.chunks_exact(cols) {
                                    for (s, g) in buf.iter_mut().zip(row) {
                                        *s += g;
                                    }
                                }
                            });
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Dense { input, w, b, act } => {
                let (input, w, b, act) = (*input, *w, *b, *act);
                let [m, k] = dims2(&self.nodes[input].shape);
                let n = self.nodes[w].shape[1];
                // Gradient at the pre-activation, from the stored outputs.
                let dpre: Vec<f64> = self.nodes[i]
                    .values
                    .iter()
                    .zip(adj)
                    .map(|(&y, &g)| g * act.derivative_from_output(y))
                    .collect();
                if self.wants_grad(input) {
                    self.with_adjoint(input, |tape, buf| {
                        mm_nt_accum(&dpre, &tape.nodes[w].values, m, n, k, buf);
                    });
                }
                if self.wants_grad(w) {
                    self.with_adjoint(w, |tape, buf| {
                        mm_tn_accum(&tape.nodes[input].values, &dpre, m, k, n, buf);
                    });
                }
                if self.wants_grad(b) {
                    self.with_adjoint(b, |_, buf| {
                        for row in dpre.chunks_exact(n) {
                            for (s, g) in buf.iter_mut().zip(row) {
                                *s += g;
                            }
                        }
                    });
                }
            }
            Op::Concat { axis, inputs } => {
                let axis = *axis;
                let inputs = inputs.clone();
                let out_shape = self.nodes[i].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_stride = out_shape[axis] * inner;
                let mut offset = 0;
                for a in inputs {
                    let part_stride = self.nodes[a].shape[axis] * inner;
                    if self.wants_grad(a) {
                        self.with_adjoint(a, |_, buf| {
                            for o in 0..outer {
                                let dst = &mut buf[o * part_stride..(o + 1) * part_stride];
                                let src =
                                    &adj[o * out_stride + offset..o * out_stride + offset + part_stride];
                                for (d, g) in dst.iter_mut().zip(src) {
                                    *d += g;
                                }
                            }
                        });
                    }
                    offset += part_stride;
                }
            }
            Op::Slice { axis, start, input } => {
                let (axis, start, a) = (*axis, *start, *input);
                if self.wants_grad(a) {
                    let in_shape = self.nodes[a].shape.clone();
                    let out_len = self.nodes[i].shape[axis];
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let in_stride = in_shape[axis] * inner;
                    let out_stride = out_len * inner;
                    self.with_adjoint(a, |_, buf| {
                        for o in 0..outer {
                            let dst = &mut buf[o * in_stride + start * inner..];
                            for (d, g) in
                                dst[..out_stride].iter_mut().zip(&adj[o * out_stride..(o + 1) * out_stride])
                            {
                                *d += g;
                            }
                        }
                    });
                }
            }
        }
    }
}

fn dims2(shape: &[usize]) -> [usize; 2] {
    match shape {
        [m, n] => [*m, *n],
        [n] => [1, *n],
        _ => [0, 0],
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
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

/// y += alpha * x
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Four axpy updates sharing one streamed `b` row; the blocked matmul's
/// inner kernel.
fn axpy4(
    alphas: [f64; 4],
    x: &[f64],
    y0: &mut [f64],
    y1: &mut [f64],
    y2: &mut [f64],
    y3: &mut [f64],
) {
    let [a0, a1, a2, a3] = alphas;
    for ((((xi, s0), s1), s2), s3) in
        x.iter().zip(y0.iter_mut()).zip(y1.iter_mut()).zip(y2.iter_mut()).zip(y3.iter_mut())
    {
        *s0 += a0 * xi;
        *s1 += a1 * xi;
        *s2 += a2 * xi;
        *s3 += a3 * xi;
    }
}

/// out[m,n] += a[m,k] · b[k,n], four output rows at a time so each streamed
/// `b` row is reused.
pub(crate) fn mm_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let blocks = m / 4 * 4;
    let mut i = 0;
    while i < blocks {
        let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let alphas = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            axpy4(alphas, &b[p * n..(p + 1) * n], r0, r1, r2, r3);
        }
        i += 4;
    }
    for i in blocks..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], out_row);
        }
    }
}

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// out[m,k] += a[m,n] · bᵀ where b is [k,n]. Transposing the (small) right
/// operand reduces it to the streaming kernel.
fn mm_nt_accum(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    let mut bt = vec![0.0; k * n];
    transpose(b, k, n, &mut bt);
    mm_accum(a, &bt, m, n, k, out);
}

/// out[k,n] += aᵀ · c where a is [m,k], c is [m,n]. Transposes the left
/// operand so the blocked kernel streams `c` row-major.
fn mm_tn_accum(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut at = vec![0.0; m * k];
    transpose(a, m, k, &mut at);
    mm_accum(&at, c, k, m, n, out);
}
