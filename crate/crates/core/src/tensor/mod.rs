//! Dense row-major `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every op that touches a tensor with `requires_grad` records its inputs in
//! the output node; `backward` walks that DAG in reverse topological order.
//! Graphs are `Rc`-based and therefore confined to the thread that built
//! them. Independent graphs can be built on separate threads.

mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use ops::gemm;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Recorded operation that produced a node, with whatever the backward
/// rule needs beyond the input and output values.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    Log10(Tensor),
    MatMul(Tensor, Tensor),
    Conv1d {
        input: Tensor,
        kernels: Tensor,
        stride: usize,
    },
    ConvTranspose1d {
        input: Tensor,
        kernels: Tensor,
        stride: usize,
    },
    Sum {
        input: Tensor,
        axis: Option<usize>,
    },
    Mean {
        input: Tensor,
        axis: Option<usize>,
    },
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Concat {
        inputs: Vec<Tensor>,
        axis: usize,
    },
    Slice {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        input: Tensor,
        gain: Tensor,
        bias: Tensor,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Fused LSTM gates: `z: [B × 4H]` pre-activations (i, f, g, o) and the
    /// previous cell state give `[B × 2H]` = `[h | c]`.
    LstmCell {
        z: Tensor,
        c_prev: Option<Tensor>,
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Log10(a)
            | Op::Reshape(a)
            | Op::Permute(a, _) => vec![a],
            Op::Conv1d { input, kernels, .. } | Op::ConvTranspose1d { input, kernels, .. } => {
                vec![input, kernels]
            }
            Op::Sum { input, .. } | Op::Mean { input, .. } | Op::Slice { input, .. } => {
                vec![input]
            }
            Op::Concat { inputs, .. } => inputs.iter().collect(),
            Op::LayerNorm { input, gain, bias, .. } => vec![input, gain, bias],
            Op::LstmCell { z, c_prev, .. } => std::iter::once(z).chain(c_prev.as_ref()).collect(),
        }
    }

    fn into_inputs(self) -> Vec<Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Log10(a)
            | Op::Reshape(a)
            | Op::Permute(a, _) => vec![a],
            Op::Conv1d { input, kernels, .. } | Op::ConvTranspose1d { input, kernels, .. } => {
                vec![input, kernels]
            }
            Op::Sum { input, .. } | Op::Mean { input, .. } | Op::Slice { input, .. } => {
                vec![input]
            }
            Op::Concat { inputs, .. } => inputs,
            Op::LayerNorm { input, gain, bias, .. } => vec![input, gain, bias],
            Op::LstmCell { z, c_prev, .. } => std::iter::once(z).chain(c_prev).collect(),
        }
    }
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

impl Drop for Node {
    // Long recurrent chains would overflow the stack with the default
    // recursive drop; unwind the DAG iteratively instead.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = match self.op.take() {
            Some(op) => op.into_inputs(),
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(op) = node.op.take() {
                    stack.extend(op.into_inputs());
                }
            }
        }
    }
}

/// An n-dimensional array of `f64`, optionally tracked for gradients.
///
/// Cloning is cheap (reference counted); the values themselves are
/// immutable once created. Only the gradient accumulator changes.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Output of an op: tracked iff any input is tracked.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let tracked = op.inputs().iter().any(|t| t.requires_grad());
        if tracked {
            Tensor::build(data, shape, true, Some(op))
        } else {
            Tensor::build(data, shape, false, None)
        }
    }

    /// Constant tensor. Fails when `data.len()` disagrees with the shape.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || numel(shape) != data.len() {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        Ok(Tensor::build(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor::build(t.data().to_vec(), shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    /// 0-d constant.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![value], Vec::new(), false, None)
    }

    /// Shorthand for a 1-d constant.
    pub fn vector(data: &[f64]) -> Tensor {
        Tensor::build(data.to_vec(), vec![data.len()], false, None)
    }

    /// Shorthand for a 2-d constant from rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged matrix rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(data, &[rows.len(), cols])
    }

    /// Same values, detached from any graph, with gradient tracking enabled.
    pub fn detach_param(&self) -> Tensor {
        Tensor::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    /// Same values, detached, untracked.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient, if `backward` has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients add onto whatever
    /// previous calls left in the accumulators.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let index: HashMap<u64, usize> = order.iter().enumerate().map(|(i, t)| (t.0.id, i)).collect();
        let mut store = GradStore {
            index,
            grads: vec![None; order.len()],
        };
        store.grads[order.len() - 1] = Some(vec![1.0]);

        for pos in (0..order.len()).rev() {
            let Some(g) = store.grads[pos].take() else {
                continue;
            };
            let node = &order[pos];
            if let Some(op) = &node.0.op {
                ops::backward(op, node, &g, &mut store);
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Tracked nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // (node, expanded)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.inputs() {
                    if p.requires_grad() && !seen.contains(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Per-backward-call gradient buffers, indexed by topological position.
pub(crate) struct GradStore {
    index: HashMap<u64, usize>,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    /// Zero-initialised accumulator for `t`, or `None` if `t` is untracked.
    pub(crate) fn slot(&mut self, t: &Tensor) -> Option<&mut [f64]> {
        if !t.requires_grad() {
            return None;
        }
        let pos = *self.index.get(&t.0.id)?;
        let n = t.numel();
        Some(self.grads[pos].get_or_insert_with(|| vec![0.0; n]))
    }
}
