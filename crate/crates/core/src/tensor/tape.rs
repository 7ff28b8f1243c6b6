use std::sync::atomic::{AtomicU64, Ordering};

use super::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(super) tape: u64,
    pub(super) index: usize,
}

impl Var {
    /// Position of the record on its tape.
    pub fn index(self) -> usize {
        self.index
    }

    pub fn tape_id(self) -> u64 {
        self.tape
    }

    /// Handle that belongs to no tape (ids start at 1).
    pub(crate) fn placeholder() -> Var {
        Var {
            tape: 0,
            index: usize::MAX,
        }
    }
}

/// Kind of a tape record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Reshape,
    Permute,
    Matmul,
    BatchedMatmul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    MulRow,
    Square,
    Sqrt,
    Abs,
    MeanAll,
    MeanAxis,
    Softmax,
    Cumsum,
    Gelu,
    Normalize,
    Concat,
    Narrow,
    Repeat,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Matmul => "matmul",
            OpKind::BatchedMatmul => "batched_matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::MeanAll => "mean_all",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Softmax => "softmax",
            OpKind::Cumsum => "cumsum",
            OpKind::Gelu => "gelu",
            OpKind::Normalize => "normalize",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Repeat => "repeat",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == s)
    }
}

const ALL_KINDS: [OpKind; 23] = [
    OpKind::Leaf,
    OpKind::Reshape,
    OpKind::Permute,
    OpKind::Matmul,
    OpKind::BatchedMatmul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddRow,
    OpKind::MulRow,
    OpKind::Square,
    OpKind::Sqrt,
    OpKind::Abs,
    OpKind::MeanAll,
    OpKind::MeanAxis,
    OpKind::Softmax,
    OpKind::Cumsum,
    OpKind::Gelu,
    OpKind::Normalize,
    OpKind::Concat,
    OpKind::Narrow,
    OpKind::Repeat,
];

/// Op record: input record indices plus whatever backward needs beyond
/// the input and output values (which stay on the tape).
#[derive(Debug)]
pub(super) enum Op<T> {
    Leaf,
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Matmul { a: usize, b: usize },
    BatchedMatmul { a: usize, b: usize, transpose_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    AddRow { x: usize, row: usize },
    MulRow { x: usize, row: usize },
    Square { x: usize },
    Sqrt { x: usize },
    Abs { x: usize },
    MeanAll { x: usize },
    MeanAxis { x: usize, axis: usize },
    Softmax { x: usize },
    Cumsum { x: usize },
    Gelu { x: usize },
    Normalize { x: usize, inv_std: Vec<T> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Repeat { x: usize, times: usize },
}

impl<T> Op<T> {
    pub(super) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::BatchedMatmul { .. } => OpKind::BatchedMatmul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::MulRow { .. } => OpKind::MulRow,
            Op::Square { .. } => OpKind::Square,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::Abs { .. } => OpKind::Abs,
            Op::MeanAll { .. } => OpKind::MeanAll,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Cumsum { .. } => OpKind::Cumsum,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Normalize { .. } => OpKind::Normalize,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Repeat { .. } => OpKind::Repeat,
        }
    }

    pub(super) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Scale { x, .. }
            | Op::Square { x }
            | Op::Sqrt { x }
            | Op::Abs { x }
            | Op::MeanAll { x }
            | Op::MeanAxis { x, .. }
            | Op::Softmax { x }
            | Op::Cumsum { x }
            | Op::Gelu { x }
            | Op::Normalize { x, .. }
            | Op::Narrow { x, .. }
            | Op::Repeat { x, .. } => vec![*x],
            Op::Matmul { a, b }
            | Op::BatchedMatmul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { x, row } | Op::MulRow { x, row } => vec![*x, *row],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) requires_grad: bool,
    pub(super) op: Op<T>,
}

/// Define-by-run recording of one forward pass.
///
/// Records are appended in execution order, so every record's inputs precede
/// it and a single reverse sweep is a valid topological traversal.
pub struct Tape<T> {
    pub(super) id: u64,
    pub(super) nodes: Vec<Node<T>>,
    pub(super) grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
    pub(super) fault: Option<(OpKind, T)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
            fault: None,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Toggle the NaN/Inf check run after every op (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Scale the input gradients produced by every `kind` record by `factor`.
    /// Test fixture for exercising gradient checkers against a broken rule.
    #[doc(hidden)]
    pub fn set_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, T::from_f64(factor)));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_node(value, requires_grad, Op::Leaf))
    }

    fn push_node(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Append an op record; requires_grad is inherited from the inputs.
    pub(super) fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let kind = op.kind();
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(value, requires_grad, op))
    }

    pub(super) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} belongs to tape {}, not tape {}",
                v.index, v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        let i = self.check(v).expect("variable from another tape");
        self.nodes[i].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        let i = self.check(v).expect("variable from another tape");
        self.nodes[i].op.kind()
    }

    /// Record indices feeding `v`.
    pub fn inputs(&self, v: Var) -> Vec<usize> {
        let i = self.check(v).expect("variable from another tape");
        self.nodes[i].op.inputs()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` requires grad
    /// and the loss depends on it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let i = self.check(v).ok()?;
        if !self.nodes[i].requires_grad {
            return None;
        }
        self.grads[i]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[i].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Reverse sweep from a scalar loss. Returns the number of records whose
    /// backward rule ran.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[root].requires_grad {
            return Ok(0);
        }
        self.grads[root] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            visited += 1;
            self.grads[i] = Some(g);
        }
        Ok(visited)
    }

    pub(super) fn accumulate(&mut self, index: usize, mut g: Vec<T>, from: OpKind) {
        if !self.nodes[index].requires_grad {
            return;
        }
        if let Some((kind, factor)) = self.fault {
            if kind == from {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
        debug_assert_eq!(g.len(), self.nodes[index].value.numel());
        match &mut self.grads[index] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}
