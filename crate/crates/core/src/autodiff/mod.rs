//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and, while the
//! tape is recording, enough information to run its vector-Jacobian product.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

mod backward;
pub mod kernels;
mod ops;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use kernels::UpsampleMode;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<F> {
    /// Parameter or constant.
    Leaf,
    /// Computed while not recording, or from inputs that need no gradient.
    Detached,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, F),
    Exp(Var),
    Log(Var),
    Powf(Var, F),
    Abs(Var),
    Clamp(Var, F, F),
    Relu(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    GridSample {
        input: Var,
        coords: Tensor<F>,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    CompositeWeights {
        density: Var,
        deltas: Tensor<F>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Recorded computation graph. Confined to one worker.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that never records backward information.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// Runs `f` with recording switched off, restoring the previous state.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
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

    /// Drops every node created after `len`. Handles to dropped nodes
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends the result of an operation after validating it.
    pub(crate) fn push_op(
        &mut self,
        name: &'static str,
        value: Tensor<F>,
        op: Op<F>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: name,
                index: self.nodes.len(),
            });
        }
        let needs = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if needs { op } else { Op::Detached };
        Ok(self.push_raw(value, op, needs))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Detached) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward::vjp(self, node, &g, &mut grads)?;
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // keep gradients of leaves only
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    pub(crate) fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

pub(crate) fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

#[allow(dead_code)]
pub(crate) fn vec_zeros<F: Real>(n: usize) -> Vec<F> {
    vec![F::zero(); n]
}
