use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::array::NdArray;
use super::ops::backward_op;
use super::TensorError;

/// Recorded operation. Input ids always refer to earlier tape entries.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    Square(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    SumAll(usize),
    SumAxis(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow { input: usize, axis: usize, start: usize },
    IndexSelect { input: usize, indices: Rc<Vec<usize>> },
    IndexAdd { input: usize, indices: Rc<Vec<usize>> },
    Softmax { input: usize, axis: usize },
    Conv1d { x: usize, w: usize, dilation: usize },
    Dft { input: usize, inverse: bool },
    StraightThrough(usize),
}

pub(crate) struct Node {
    pub(crate) value: Rc<NdArray>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Append-only record of a forward computation.
///
/// A tape is single-threaded (`!Sync`); build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Differentiable leaf.
    pub fn var(&self, value: NdArray) -> Tensor<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&self, value: NdArray) -> Tensor<'_> {
        self.push(value, false, Op::Leaf)
    }

    pub(crate) fn push(&self, value: NdArray, requires_grad: bool, op: Op) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), requires_grad, op });
        Tensor { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<NdArray> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<Gradients, TensorError> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<NdArray>> = vec![None; nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(NdArray::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in backward_op(&nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor<'_>) -> Option<&NdArray> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros of the tensor's shape when nothing flowed back.
    pub fn get_or_zeros(&self, t: Tensor<'_>) -> NdArray {
        self.get(t).cloned().unwrap_or_else(|| NdArray::zeros(&t.shape()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<'t> Tensor<'t> {
    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<NdArray> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Stop-gradient: same value, cut from the graph.
    pub fn detach(&self) -> Tensor<'t> {
        let v = (*self.value()).clone();
        self.tape.push(v, false, Op::Leaf)
    }
}
