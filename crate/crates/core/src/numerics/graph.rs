//! Reverse-accumulation computation graph.
//!
//! Nodes are appended in evaluation order, so parents always have smaller
//! indices than their children and a single reverse sweep visits the graph
//! in topological order. Gradients reaching a node along several paths are
//! summed.

use super::tensor::{gelu_grad, gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    L2Normalize(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
    },
    GatherRows(NodeId, Vec<usize>),
    SumSq(NodeId),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// A single-writer computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
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

    /// A trainable leaf. Always receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, is_param: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: is_param,
            is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).gelu();
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).l2_normalize_rows()?;
        Ok(self.push(v, Op::L2Normalize(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice(axis, start, len)?;
        Ok(self.push(
            v,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            &[a],
        ))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).gather_rows(&indices)?;
        Ok(self.push(v, Op::GatherRows(a, indices), &[a]))
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_sq());
        self.push(v, Op::SumSq(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar root. Every parameter leaf gets a
    /// gradient (zeros when the root does not depend on it).
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0])?);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[i].is_none() {
                let shape = node.value.shape().to_vec();
                let n = node.value.len();
                grads[i] = Some(Tensor::new(shape, vec![0.0; n])?);
            } else if !node.is_param && matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = gemm(g, false, self.value(*b), true, "matmul.backward")?;
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = gemm(self.value(*a), true, g, false, "matmul.backward")?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let c = g.cols();
                    let mut sums = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (s, v) in sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::matrix(1, c, sums)?);
                }
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                for (d, t) in ga.data_mut().iter_mut().zip(y.data()) {
                    *d *= 1.0 - t * t;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                for (d, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= gelu_grad(*x);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = yr.iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for (d, p) in ga.row_mut(r).iter_mut().zip(yr) {
                        *d = p * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let row = ga.row_mut(r);
                    if norm == 0.0 {
                        row.fill(0.0);
                        continue;
                    }
                    let yr = y.row(r);
                    let dot: f64 = yr.iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for (d, p) in row.iter_mut().zip(yr) {
                        *d = (*d - p * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let v = self.value(*p);
                    let len = if *axis == 0 { v.rows() } else { v.cols() };
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice(*axis, offset, len)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let x = self.value(*src);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                if *axis == 0 {
                    let c = x.cols();
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                } else {
                    for r in 0..x.rows() {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                }
                self.accumulate(grads, *src, ga);
            }
            Op::GatherRows(src, indices) => {
                let x = self.value(*src);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (out_row, &i) in indices.iter().enumerate() {
                    for (d, v) in ga.row_mut(i).iter_mut().zip(g.row(out_row)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *src, ga);
            }
            Op::SumSq(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, self.value(*a).scale(2.0 * s));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), vec![s; x.len()])?);
            }
        }
        Ok(())
    }
}
