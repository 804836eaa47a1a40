//! The per-step tape: recorded operations and the reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{check_finite, next_graph_epoch, GradSlot, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Recorded operation plus the forward context its backward rule needs.
pub(crate) enum Op<S: Scalar> {
    Leaf,
    /// `bcast_rhs`: rhs is a vector added to every row of a 2-D lhs.
    Add { bcast_rhs: bool },
    Sub,
    Mul,
    Scale(S),
    Matmul { m: usize, k: usize, n: usize },
    /// Keeps the forward patch matrix for the weight-gradient GEMM.
    Conv2d { dims: ConvDims, cols: Arc<Vec<S>> },
    Relu,
    /// Saved argmax positions as linear indices into the input.
    MaxPool2x2 { indices: Vec<u32> },
    Mean,
    Sum,
    Log,
    Exp,
    Softmax,
    SqL2Rowwise,
    Reshape,
}

pub(crate) struct Node<S: Scalar> {
    pub op: Op<S>,
    pub inputs: Vec<usize>,
    pub value: Arc<Vec<S>>,
    pub shape: Vec<usize>,
    /// Grad slot of the originating leaf tensor, if it has one.
    pub slot: Option<GradSlot<S>>,
    /// Whether gradient must flow into or through this node.
    pub tracked: bool,
}

/// A tape of operations in topological order, built during one forward pass
/// and consumed by [`Graph::backward`].
pub struct Graph<S: Scalar> {
    pub(crate) epoch: u64,
    pub(crate) nodes: Vec<Node<S>>,
    /// Leaf node per grad-slot identity, so a parameter used several times
    /// maps to a single node.
    leaf_ids: HashMap<usize, usize>,
    recording: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            epoch: next_graph_epoch(),
            nodes: Vec::new(),
            leaf_ids: HashMap::new(),
            recording: true,
        }
    }

    /// Runs `f` with recording disabled; outputs inside are plain constants.
    pub fn with_no_grad<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.recording;
        self.recording = false;
        let out = f(self);
        self.recording = prev;
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether gradient flows out of `t` in this graph.
    pub(crate) fn is_tracked(&self, t: &Tensor<S>) -> bool {
        if let Some((epoch, id)) = t.ctx {
            if epoch == self.epoch {
                return self.nodes[id].tracked;
            }
        }
        t.requires_grad() && t.grad_slot().is_some()
    }

    /// Node id for an input tensor, registering leaves on first use.
    fn input_id(&mut self, t: &Tensor<S>) -> usize {
        if let Some((epoch, id)) = t.ctx {
            if epoch == self.epoch {
                return id;
            }
        }
        if let Some(slot) = t.grad_slot() {
            if t.requires_grad() {
                let key = Arc::as_ptr(slot) as usize;
                if let Some(&id) = self.leaf_ids.get(&key) {
                    return id;
                }
                let id = self.push_node(Node {
                    op: Op::Leaf,
                    inputs: vec![],
                    value: Arc::clone(t.values_arc()),
                    shape: t.shape().to_vec(),
                    slot: Some(Arc::clone(slot)),
                    tracked: true,
                });
                self.leaf_ids.insert(key, id);
                return id;
            }
        }
        // Constant input: recorded for its values only.
        self.push_node(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: Arc::clone(t.values_arc()),
            shape: t.shape().to_vec(),
            slot: None,
            tracked: false,
        })
    }

    fn push_node(&mut self, node: Node<S>) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Registers an op output if recording is on and any input is tracked;
    /// otherwise returns a plain constant tensor.
    pub(crate) fn emit(
        &mut self,
        op: Op<S>,
        inputs: &[&Tensor<S>],
        shape: Vec<usize>,
        values: Vec<S>,
    ) -> Tensor<S> {
        self.emit_shared(op, inputs, shape, Arc::new(values))
    }

    pub(crate) fn emit_shared(
        &mut self,
        op: Op<S>,
        inputs: &[&Tensor<S>],
        shape: Vec<usize>,
        values: Arc<Vec<S>>,
    ) -> Tensor<S> {
        let track = self.recording && inputs.iter().any(|t| self.is_tracked(t));
        if !track {
            return Tensor::make_output_shared(shape, values, None);
        }
        let ids: Vec<usize> = inputs.iter().map(|t| self.input_id(t)).collect();
        let id = self.push_node(Node {
            op,
            inputs: ids,
            value: Arc::clone(&values),
            shape: shape.clone(),
            slot: None,
            tracked: true,
        });
        Tensor::make_output_shared(shape, values, Some((self.epoch, id)))
    }

    /// Reverse sweep from a scalar loss. Consumes the graph (tape semantics:
    /// a fresh graph is built for every step). Gradients accumulate
    /// additively into leaf slots; call [`Tensor::zero_grad`] between steps.
    pub fn backward(self, loss: &Tensor<S>) -> Result<()> {
        let loss_id = match loss.ctx {
            Some((epoch, id)) if epoch == self.epoch => id,
            _ => {
                return Err(Error::contract(
                    "backward: loss tensor is not an output of this graph",
                ))
            }
        };
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss_id] = Some(vec![S::ONE]);

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            debug_assert_eq!(g.len(), node.value.len());
            self.propagate(id, &g, &mut grads)?;
            if let Some(slot) = &node.slot {
                let mut locked = slot.lock().unwrap();
                match locked.as_mut() {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *locked = Some(g),
                }
                check_finite("backward gradient", locked.as_ref().unwrap())?;
            }
        }
        Ok(())
    }

    pub(crate) fn accumulate(
        &self,
        grads: &mut [Option<Vec<S>>],
        id: usize,
        contribution: impl FnOnce(&mut [S]),
    ) {
        if !self.nodes[id].tracked {
            return;
        }
        let buf = grads[id].get_or_insert_with(|| vec![S::ZERO; self.nodes[id].value.len()]);
        contribution(buf);
    }

    /// Grad buffer for an input, allocated zeroed; `None` if untracked.
    pub(crate) fn grad_buf<'a>(
        &self,
        grads: &'a mut [Option<Vec<S>>],
        id: usize,
    ) -> Option<&'a mut Vec<S>> {
        if !self.nodes[id].tracked {
            return None;
        }
        Some(grads[id].get_or_insert_with(|| vec![S::ZERO; self.nodes[id].value.len()]))
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add { bcast_rhs } => {
                self.accumulate(grads, ins[0], |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                if *bcast_rhs {
                    let cols = self.nodes[ins[1]].value.len();
                    self.accumulate(grads, ins[1], |d| {
                        for chunk in g.chunks_exact(cols) {
                            for (dv, &gv) in d.iter_mut().zip(chunk) {
                                *dv += gv;
                            }
                        }
                    });
                } else {
                    self.accumulate(grads, ins[1], |d| {
                        for (d, &gv) in d.iter_mut().zip(g) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Sub => {
                self.accumulate(grads, ins[0], |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, ins[1], |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += -gv;
                    }
                });
            }
            Op::Mul => {
                let a = &self.nodes[ins[0]].value;
                let b = &self.nodes[ins[1]].value;
                self.accumulate(grads, ins[0], |d| {
                    for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(b.iter()) {
                        *d += gv * bv;
                    }
                });
                self.accumulate(grads, ins[1], |d| {
                    for ((d, &gv), &av) in d.iter_mut().zip(g).zip(a.iter()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(c) => {
                let c = *c;
                self.accumulate(grads, ins[0], |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Matmul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = Arc::clone(&self.nodes[ins[0]].value);
                let b = Arc::clone(&self.nodes[ins[1]].value);
                if let Some(da) = self.grad_buf(grads, ins[0]) {
                    // dA += g @ B^T
                    S::gemm(
                        m, n, k, S::ONE, g, n as isize, 1, &b, 1, n as isize, S::ONE, da,
                        k as isize, 1,
                    );
                }
                if let Some(db) = self.grad_buf(grads, ins[1]) {
                    // dB += A^T @ g
                    S::gemm(
                        k, m, n, S::ONE, &a, 1, k as isize, g, n as isize, 1, S::ONE, db,
                        n as isize, 1,
                    );
                }
            }
            Op::Conv2d { dims, cols } => {
                super::ops::conv2d_backward(self, *dims, cols, ins, g, grads)?;
            }
            Op::Relu => {
                let x = &self.nodes[ins[0]].value;
                self.accumulate(grads, ins[0], |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x.iter()) {
                        if xv > S::ZERO {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxPool2x2 { indices } => {
                self.accumulate(grads, ins[0], |d| {
                    for (&idx, &gv) in indices.iter().zip(g) {
                        d[idx as usize] += gv;
                    }
                });
            }
            Op::Mean => {
                let n = self.nodes[ins[0]].value.len();
                let scale = S::ONE / S::from_f64(n as f64);
                let gv = g[0];
                self.accumulate(grads, ins[0], |d| {
                    for d in d.iter_mut() {
                        *d += scale * gv;
                    }
                });
            }
            Op::Sum => {
                let gv = g[0];
                self.accumulate(grads, ins[0], |d| {
                    for d in d.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Log => {
                let x = &self.nodes[ins[0]].value;
                self.accumulate(grads, ins[0], |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x.iter()) {
                        // Zero slope inside the clamped region.
                        if xv >= S::LOG_CLAMP {
                            *d += gv / xv;
                        }
                    }
                });
            }
            Op::Exp => {
                let y = &node.value;
                self.accumulate(grads, ins[0], |d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y.iter()) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Softmax => {
                let y = Arc::clone(&node.value);
                let cols = *node.shape.last().unwrap();
                self.accumulate(grads, ins[0], |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let mut dot = S::ZERO;
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::SqL2Rowwise => {
                let x = &self.nodes[ins[0]].value;
                let rows = node.value.len();
                let cols = x.len() / rows;
                let two = S::from_f64(2.0);
                self.accumulate(grads, ins[0], |d| {
                    for ((drow, xrow), &gv) in
                        d.chunks_exact_mut(cols).zip(x.chunks_exact(cols)).zip(g)
                    {
                        for (dv, &xv) in drow.iter_mut().zip(xrow) {
                            *dv += two * xv * gv;
                        }
                    }
                });
            }
            Op::Reshape => {
                self.accumulate(grads, ins[0], |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
        }
        Ok(())
    }
}
