//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the records in reverse and
//! accumulates vector-Jacobian products. Tapes are rebuilt for every forward
//! pass, so no intermediate survives a parameter update.

mod backward;
mod ops;

pub use ops::{concat_cols, gather_rows, softmax_cross_entropy, unfold, where_rows};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    /// rhs has a single element.
    Scalar,
    /// rhs is a vector matching the last axis of lhs.
    Row,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Abs,
    Recip,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
    },
    Sub {
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Shift {
        a: NodeId,
    },
    Unary {
        a: NodeId,
        kind: UnaryKind,
    },
    SoftmaxRows {
        a: NodeId,
    },
    LogSoftmaxRows {
        a: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        grad: Vec<f64>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    NarrowCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    Reshape {
        a: NodeId,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    WhereRows {
        mask: Vec<bool>,
        a: NodeId,
        b: NodeId,
    },
    Unfold {
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    CifAssign {
        weights: NodeId,
        cum: Vec<f64>,
    },
    /// Scalar output whose gradient w.r.t. `a` was computed during the forward pass.
    ScalarWithGrad {
        a: NodeId,
        grad: Tensor,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | Add { a, b, .. } | Sub { a, b, .. } | Mul { a, b, .. } => {
                vec![*a, *b]
            }
            WhereRows { a, b, .. } => vec![*a, *b],
            Transpose { a }
            | Scale { a, .. }
            | Shift { a }
            | Unary { a, .. }
            | SoftmaxRows { a }
            | LogSoftmaxRows { a }
            | Sum { a }
            | Mean { a }
            | NarrowCols { a, .. }
            | Reshape { a }
            | ScalarWithGrad { a, .. } => vec![*a],
            CrossEntropy { logits, .. } => vec![*logits],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols { parts } => parts.clone(),
            Gather { table, .. } => vec![*table],
            Unfold { x, .. } => vec![*x],
            CifAssign { weights, .. } => vec![*weights],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Confined to a single thread; values can be detached with [`Var::value`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, NodeId>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = match &op {
            Op::Leaf => false,
            op => {
                let nodes = self.nodes.borrow();
                op.inputs().iter().any(|&i| nodes[i].requires_grad)
            }
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records a value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    /// Records a free input whose gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Binds a stored parameter to this tape. Repeated binds return the same node,
    /// so every use accumulates into one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let var = self.leaf(store.get(id).clone());
        self.bound.borrow_mut().insert(id, var.id);
        var
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// w.r.t. `input`.
    pub fn scalar_with_grad<'t>(&'t self, input: Var<'t>, value: f64, grad: Tensor) -> Var<'t> {
        assert_eq!(input.shape(), grad.shape(), "precomputed gradient shape");
        self.push(
            Tensor::scalar(value),
            Op::ScalarWithGrad { a: input.id, grad },
        )
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Detached copy-on-write view of the value.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    bound: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; zeros when `var` is not on a path to the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.by_node(var.id)
    }

    fn by_node(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient of every parameter bound to the tape, in parameter order.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .map(|&(pid, node)| (pid, self.by_node(node)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.bound
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|&(_, node)| self.by_node(node))
    }
}
