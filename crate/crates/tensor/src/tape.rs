use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Sentinel index for [`Var::gather`]: the output element is zero.
pub const ZERO_INDEX: usize = usize::MAX;

/// Spatio-temporal extent of one sampled feature level, stored row-major as
/// `t * h * w` rows starting at `offset` inside a stacked value matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub offset: usize,
}

impl LevelSpec {
    pub fn rows(&self) -> usize {
        self.t * self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Relu,
    Exp,
    Ln,
    Sin,
    Cos,
    Abs,
    Sqrt,
    Powf(f64),
    Clamp(f64, f64),
    /// Clamps in the forward pass, passes the gradient through unchanged.
    ClampStraightThrough(f64, f64),
}

/// One recorded primitive. Parent references are node ids on the same tape.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    SumAll {
        x: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        eps: f64,
    },
    Reshape {
        x: usize,
    },
    BroadcastTo {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        x: usize,
        index: Rc<[usize]>,
    },
    WeightedRows {
        x: usize,
        taps: Rc<Vec<Vec<(usize, f64)>>>,
    },
    TrilinearSample {
        value: usize,
        loc: usize,
        grid: (usize, usize, usize),
    },
    MsDeformSample {
        value: usize,
        loc: usize,
        attn: usize,
        levels: Rc<[LevelSpec]>,
        heads: usize,
        points: usize,
    },
    LogitShift {
        delta: usize,
        base: usize,
        eps: f64,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
                BinaryKind::Maximum => "maximum",
                BinaryKind::Minimum => "minimum",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Neg => "neg",
                UnaryKind::Scale(_) => "scale",
                UnaryKind::AddScalar(_) => "add_scalar",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Relu => "relu",
                UnaryKind::Exp => "exp",
                UnaryKind::Ln => "ln",
                UnaryKind::Sin => "sin",
                UnaryKind::Cos => "cos",
                UnaryKind::Abs => "abs",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Powf(_) => "powf",
                UnaryKind::Clamp(..) => "clamp",
                UnaryKind::ClampStraightThrough(..) => "clamp_st",
            },
            Op::MatMul { .. } => "matmul",
            Op::SumAll { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::WeightedRows { .. } => "weighted_rows",
            Op::TrilinearSample { .. } => "trilinear_sample",
            Op::MsDeformSample { .. } => "ms_deform_sample",
            Op::LogitShift { .. } => "logit_shift",
        }
    }

    pub(crate) fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::SumAll { x }
            | Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Reshape { x }
            | Op::BroadcastTo { x }
            | Op::Narrow { x, .. }
            | Op::Gather { x, .. }
            | Op::WeightedRows { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::TrilinearSample { value, loc, .. } => vec![*value, *loc],
            Op::MsDeformSample {
                value, loc, attn, ..
            } => vec![*value, *loc, *attn],
            Op::LogitShift { delta, base, .. } => vec![*delta, *base],
        }
    }
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Rc<[f64]>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Ordered record of the primitives evaluated during one forward pass.
///
/// A tape is single-threaded and meant to be dropped after `backward`.
/// Independent forward passes (e.g. the items of a batch) use independent
/// tapes.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
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

    /// Records `t` as a leaf. It takes part in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), Rc::from(t.data()), t.requires_grad())
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), Rc::from(t.data()), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push_leaf(Vec::new(), Rc::from(vec![value]), false)
    }

    pub(crate) fn push_leaf(&self, shape: Vec<usize>, value: Rc<[f64]>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            shape,
            value: Rc::from(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<[f64]> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Fails on the first node holding a NaN or infinity, naming the
    /// primitive that produced it.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.borrow().iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: n.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", root.shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            crate::backward::propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf `v`; `None` if `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Like [`wrt`](Self::wrt) but returns zeros for reachable-by-shape
    /// leaves with no recorded gradient.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        match self.wrt(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.numel()],
        }
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<[f64]> {
        self.tape.value_of(self.id)
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value().to_vec()).expect("tape node shape")
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.push_leaf(shape, value, false)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }
}
