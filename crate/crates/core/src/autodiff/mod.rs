//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and the inputs
//! needed by its backward rule. [`Tape::backward`] walks the nodes in reverse
//! recording order, visiting each once, so inputs always receive their
//! gradient after every consumer has contributed.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, relative_error, Difference, GradCheckReport};

use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation, for inspecting what a graph is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Matmul,
    Transpose,
    Reshape,
    Narrow,
    Concat,
    MeanAxis,
    Sum,
    Mean,
    Abs,
    Softmax,
    Gelu,
    LayerNorm,
    Conv2d,
    ConvTranspose2d,
    FloorAbs,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Narrow { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    MeanAxis { a: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Softmax { a: Var, axis: usize },
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var> },
    FloorAbs { a: Var, min: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Abs(..) => OpKind::Abs,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::FloorAbs { .. } => OpKind::FloorAbs,
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    strict_division: bool,
    check_finite: bool,
    attention_macs: Option<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            strict_division: false,
            check_finite: cfg!(debug_assertions),
            attention_macs: None,
        }
    }

    /// In strict mode, dividing by a tensor that contains an exact zero is an error.
    pub fn strict_division(mut self, on: bool) -> Self {
        self.strict_division = on;
        self
    }

    /// When on, any op producing a NaN or infinity fails with [`Error::Numeric`].
    pub fn check_finite(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Starts counting multiply-adds of matmuls recorded through
    /// [`Tape::attention_matmul`].
    pub fn enable_attention_counter(&mut self) {
        self.attention_macs = Some(0);
    }

    pub fn attention_macs(&self) -> Result<u64> {
        self.attention_macs
            .ok_or_else(|| Error::usage("attention counter is not enabled on this tape"))
    }

    pub(crate) fn count_attention(&mut self, macs: u64) {
        if let Some(c) = self.attention_macs.as_mut() {
            *c += macs;
        }
    }

    pub(crate) fn is_strict_division(&self) -> bool {
        self.strict_division
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a value treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Kinds of every recorded op, in recording order.
    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    /// Op kinds of every node `output` depends on, including itself.
    pub fn ancestor_kinds(&self, output: Var) -> Vec<OpKind> {
        let mut seen = vec![false; output.0 + 1];
        seen[output.0] = true;
        let mut kinds = Vec::new();
        for i in (0..=output.0).rev() {
            if !seen[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            kinds.push(op.kind());
            for v in op_inputs(op) {
                seen[v.0] = true;
            }
        }
        kinds
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::numeric(format!(
                "{:?} produced a non-finite value (node {})",
                op.kind(),
                self.nodes.len()
            )));
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradient accumulator for input `v`, allocated on first use; `None` if `v` needs no gradient.
    pub(crate) fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Vec<T>>],
        v: Var,
    ) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

pub(crate) fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::Matmul { a, b } => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Narrow { a, .. }
        | Op::MeanAxis { a, .. }
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Abs(a)
        | Op::Softmax { a, .. }
        | Op::Gelu(a)
        | Op::FloorAbs { a, .. } => vec![*a],
        Op::Concat { parts, .. } => parts.clone(),
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
    }
}

/// Result of a reverse pass: a gradient for every tensor reachable from the loss.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; all zeros if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out without copying.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
