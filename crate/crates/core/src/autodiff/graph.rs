//! Define-then-run computation graphs with reverse-mode gradients.
//!
//! A [`Graph`] is built once from named inputs and operations, then
//! evaluated with [`Graph::forward`] against a set of [`Feeds`]. After a
//! forward pass, [`Graph::backward`] propagates the gradient of a scalar
//! node back to every trainable input.
//!
//! ```
//! use dsd_core::autodiff::{Feeds, Graph};
//! use dsd_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param("x");
//! let y = g.mul(x, x);
//! g.mark_output("y", y);
//!
//! let three = Tensor::scalar(3.0);
//! let out = g.forward(&Feeds::new().with("x", &three)).unwrap();
//! assert_eq!(out["y"].item(), 9.0);
//!
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads["x"].item(), 6.0);
//! ```

use std::collections::BTreeMap;

use super::kernels::{gemm, MatRef};
use super::params::Params;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded at a node. Operand order lives in [`Node::inputs`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Value supplied through [`Feeds`] at forward time.
    Input { name: String, trainable: bool },
    /// Value fixed at construction.
    Constant,
    /// `[m, k] · [k, n]`.
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    /// `x · w + b` with `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    Affine,
    Relu,
    Tanh,
    /// Concatenation along the last axis.
    Concat,
    /// Half-open range `[start, end)` of the last axis.
    Slice { start: usize, end: usize },
    /// Mean of squared differences over every element.
    Mse,
    /// Sum of squared differences over every element.
    Sse,
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Affine => "affine",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Mse => "mse",
            Op::Sse => "sse",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    id: NodeId,
    op: Op,
    inputs: Vec<NodeId>,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    needs_grad: bool,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn value(&self) -> Option<&Tensor> {
        self.value.as_ref()
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Named tensors handed to [`Graph::forward`]. Borrowed, so parameter sets
/// are not copied per step.
#[derive(Default, Clone)]
pub struct Feeds<'a> {
    map: BTreeMap<&'a str, &'a Tensor>,
}

impl<'a> Feeds<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Tensor) {
        self.map.insert(name, value);
    }

    pub fn with(mut self, name: &'a str, value: &'a Tensor) -> Self {
        self.insert(name, value);
        self
    }

    /// Adds every tensor of a parameter set under its own name.
    pub fn with_params(mut self, params: &'a Params) -> Self {
        for (name, t) in params.iter() {
            self.map.insert(name, t);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

#[derive(Default, Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs_by_name: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.grad.as_ref())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        for i in &inputs {
            assert!(i.0 < self.nodes.len(), "operand {} does not exist", i.0);
        }
        let needs_grad = match &op {
            Op::Input { trainable, .. } => *trainable,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            op,
            inputs,
            value: None,
            grad: None,
            needs_grad,
        });
        id
    }

    fn named_input(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.inputs_by_name.get(name) {
            match &self.nodes[id.0].op {
                Op::Input { trainable: t, .. } if *t == trainable => return id,
                _ => panic!("input `{name}` already declared with different trainability"),
            }
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                trainable,
            },
            Vec::new(),
        );
        self.inputs_by_name.insert(name.to_string(), id);
        id
    }

    /// Non-trainable input. Declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.named_input(name, false)
    }

    /// Trainable input; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: &str) -> NodeId {
        self.named_input(name, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Constant, Vec::new());
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(factor), vec![a])
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine, vec![x, w, b])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        assert!(start < end, "empty slice {start}..{end}");
        self.push(Op::Slice { start, end }, vec![x])
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mse, vec![a, b])
    }

    pub fn sse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sse, vec![a, b])
    }

    /// Names a node so its value appears in the map returned by `forward`.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        assert!(id.0 < self.nodes.len());
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        let mut s = format!("node #{} ({})", id.0, node.op.tag());
        if let Op::Input { name, .. } = &node.op {
            s.push_str(&format!(" `{name}`"));
        }
        if let Some((name, _)) = self.outputs.iter().find(|(_, &o)| o == id) {
            s.push_str(&format!(" output `{name}`"));
        }
        s
    }

    fn mismatch(&self, id: NodeId, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.describe(id),
            detail,
        }
    }

    /// Evaluates every node. Returns the values of marked outputs.
    pub fn forward(&mut self, feeds: &Feeds<'_>) -> Result<BTreeMap<String, Tensor>> {
        for node in &mut self.nodes {
            node.grad = None;
        }
        for idx in 0..self.nodes.len() {
            let id = NodeId(idx);
            let value = match &self.nodes[idx].op {
                Op::Constant => {
                    let v = self.nodes[idx].value.as_ref().expect("constant without value");
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            node: self.describe(id),
                        });
                    }
                    continue;
                }
                Op::Input { name, .. } => feeds
                    .get(name)
                    .ok_or_else(|| Error::MissingFeed(name.clone()))?
                    .clone(),
                _ => self.eval_op(id)?,
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: self.describe(id),
                });
            }
            self.nodes[idx].value = Some(value);
        }
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.nodes[id.0].value.clone().unwrap()))
            .collect())
    }

    fn operand(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("operands are evaluated before their consumers")
    }

    fn eval_op(&self, id: NodeId) -> Result<Tensor> {
        let node = &self.nodes[id.0];
        let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| self.operand(i)).collect();
        match &node.op {
            Op::Input { .. } | Op::Constant => unreachable!(),
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.mismatch(
                        id,
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), 0.0, &mut out);
                Tensor::new(vec![m, n], out)
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                if a.shape() != b.shape() {
                    return Err(self.mismatch(
                        id,
                        format!("elementwise operands {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let f: fn(f64, f64) -> f64 = match node.op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::Scale(c) => Ok(ins[0].map(|v| v * c)),
            Op::Affine => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let ok = x.rank() == 2
                    && w.rank() == 2
                    && b.rank() == 1
                    && x.shape()[1] == w.shape()[0]
                    && w.shape()[1] == b.shape()[0];
                if !ok {
                    return Err(self.mismatch(
                        id,
                        format!(
                            "affine x{:?} w{:?} b{:?}",
                            x.shape(),
                            w.shape(),
                            b.shape()
                        ),
                    ));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(b.data());
                }
                gemm(MatRef::new(x.data(), m, k), MatRef::new(w.data(), k, n), 1.0, &mut out);
                Tensor::new(vec![m, n], out)
            }
            Op::Relu => Ok(ins[0].map(|v| v.max(0.0))),
            Op::Tanh => Ok(ins[0].map(f64::tanh)),
            Op::Concat => {
                let lead = &ins[0].shape()[..ins[0].rank().saturating_sub(1)];
                if ins.iter().any(|t| t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead) {
                    let shapes: Vec<_> = ins.iter().map(|t| t.shape().to_vec()).collect();
                    return Err(self.mismatch(id, format!("concat of {shapes:?}")));
                }
                let rows = ins[0].rows();
                let total: usize = ins.iter().map(|t| t.cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for t in &ins {
                        out.extend_from_slice(t.row(r));
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(total);
                Tensor::new(shape, out)
            }
            Op::Slice { start, end } => {
                let x = ins[0];
                if x.rank() == 0 || *end > x.cols() {
                    return Err(self.mismatch(
                        id,
                        format!("slice {start}..{end} of {:?}", x.shape()),
                    ));
                }
                let mut out = Vec::with_capacity(x.rows() * (end - start));
                for r in 0..x.rows() {
                    out.extend_from_slice(&x.row(r)[*start..*end]);
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = end - start;
                Tensor::new(shape, out)
            }
            Op::Mse | Op::Sse => {
                let (a, b) = (ins[0], ins[1]);
                if a.shape() != b.shape() {
                    return Err(self.mismatch(
                        id,
                        format!("error between {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let sum: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let value = if node.op == Op::Mse {
                    sum / a.len() as f64
                } else {
                    sum
                };
                Ok(Tensor::scalar(value))
            }
        }
    }

    /// Back-propagates from a scalar node. Returns gradients of every
    /// trainable input, keyed by name.
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(loss.0));
        }
        let loss_value = self.nodes[loss.0].value.as_ref().ok_or_else(|| Error::NoValue {
            node: self.describe(loss),
        })?;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar {
                node: self.describe(loss),
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.value.is_none() {
                return Err(Error::NoValue {
                    node: self.describe(node.id),
                });
            }
            let contributions = self.local_grads(NodeId(idx), &g);
            for (input, contrib) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Input { name, trainable: true }, Some(g)) = (&node.op, &g) {
                out.insert(name.clone(), g.clone());
            }
            node.grad = g;
        }
        Ok(out)
    }

    /// Gradient contributions from `id` to those operands that need one.
    fn local_grads(&self, id: NodeId, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[id.0];
        let wants = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
        let val = |k: usize| self.operand(node.inputs[k]);
        let mut out = Vec::new();
        match &node.op {
            Op::Input { .. } | Op::Constant => {}
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let gm = MatRef::new(g.data(), m, n);
                if wants(0) {
                    let mut da = vec![0.0; m * k];
                    gemm(gm, MatRef::new(b.data(), k, n).t(), 0.0, &mut da);
                    out.push((node.inputs[0], Tensor::new(vec![m, k], da).unwrap()));
                }
                if wants(1) {
                    let mut db = vec![0.0; k * n];
                    gemm(MatRef::new(a.data(), m, k).t(), gm, 0.0, &mut db);
                    out.push((node.inputs[1], Tensor::new(vec![k, n], db).unwrap()));
                }
            }
            Op::Add => {
                for k in 0..2 {
                    if wants(k) {
                        out.push((node.inputs[k], g.clone()));
                    }
                }
            }
            Op::Sub => {
                if wants(0) {
                    out.push((node.inputs[0], g.clone()));
                }
                if wants(1) {
                    out.push((node.inputs[1], g.map(|v| -v)));
                }
            }
            Op::Mul => {
                for (k, other) in [(0, 1), (1, 0)] {
                    if wants(k) {
                        let o = val(other);
                        let data = g.data().iter().zip(o.data()).map(|(x, y)| x * y).collect();
                        out.push((node.inputs[k], Tensor::new(g.shape().to_vec(), data).unwrap()));
                    }
                }
            }
            Op::Scale(c) => {
                if wants(0) {
                    out.push((node.inputs[0], g.map(|v| v * c)));
                }
            }
            Op::Affine => {
                let (x, w) = (val(0), val(1));
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let gm = MatRef::new(g.data(), m, n);
                if wants(0) {
                    let mut dx = vec![0.0; m * k];
                    gemm(gm, MatRef::new(w.data(), k, n).t(), 0.0, &mut dx);
                    out.push((node.inputs[0], Tensor::new(vec![m, k], dx).unwrap()));
                }
                if wants(1) {
                    let mut dw = vec![0.0; k * n];
                    gemm(MatRef::new(x.data(), m, k).t(), gm, 0.0, &mut dw);
                    out.push((node.inputs[1], Tensor::new(vec![k, n], dw).unwrap()));
                }
                if wants(2) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in db.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    out.push((node.inputs[2], Tensor::vector(db)));
                }
            }
            Op::Relu => {
                if wants(0) {
                    let x = val(0);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    out.push((node.inputs[0], Tensor::new(g.shape().to_vec(), data).unwrap()));
                }
            }
            Op::Tanh => {
                if wants(0) {
                    let y = node.value.as_ref().unwrap();
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect();
                    out.push((node.inputs[0], Tensor::new(g.shape().to_vec(), data).unwrap()));
                }
            }
            Op::Concat => {
                let rows = g.rows();
                let mut offset = 0;
                for (k, &input) in node.inputs.iter().enumerate() {
                    let part = val(k);
                    let w = part.cols();
                    if wants(k) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        out.push((input, Tensor::new(part.shape().to_vec(), data).unwrap()));
                    }
                    offset += w;
                }
            }
            Op::Slice { start, end } => {
                if wants(0) {
                    let x = val(0);
                    let mut dx = Tensor::zeros(x.shape());
                    let cols = x.cols();
                    for r in 0..x.rows() {
                        dx.data_mut()[r * cols + start..r * cols + end].copy_from_slice(g.row(r));
                    }
                    out.push((node.inputs[0], dx));
                }
            }
            Op::Mse | Op::Sse => {
                let (a, b) = (val(0), val(1));
                let mut scale = 2.0 * g.item();
                if node.op == Op::Mse {
                    scale /= a.len() as f64;
                }
                let diff: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                if wants(1) {
                    let neg = diff.iter().map(|v| -v).collect();
                    out.push((node.inputs[1], Tensor::new(b.shape().to_vec(), neg).unwrap()));
                }
                if wants(0) {
                    out.push((node.inputs[0], Tensor::new(a.shape().to_vec(), diff).unwrap()));
                }
            }
        }
        out
    }
}

/// Evaluates a graph and returns its marked outputs.
pub fn forward_eval(graph: &mut Graph, feeds: &Feeds<'_>) -> Result<BTreeMap<String, Tensor>> {
    graph.forward(feeds)
}

/// Back-propagates from `loss` and returns gradients of trainable inputs.
pub fn backward(graph: &mut Graph, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
    graph.backward(loss)
}
