//! Reverse-mode automatic differentiation on dynamically shaped tensors.
//!
//! A [`Graph`] is a per-step arena of eagerly evaluated nodes. Building an
//! expression records the op and its parents; [`Graph::backward`] walks the
//! arena in reverse creation order (creation order is topological) and
//! accumulates gradients for every node that requires them.
//!
//! The element type is generic so the same loss code can train in `f32` and
//! be finite-difference checked in `f64`.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use num_traits::Float;

mod nn;
mod ops;

pub mod gradcheck;


pub use nn::{conv2d_shape, BatchNormStats};

/// Element type of a differentiable tensor.
pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) type NodeId = usize;

pub(crate) enum Op<F: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, F),
    AddScalar(NodeId, F),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, F),
    Softplus(NodeId),
    Sigmoid(NodeId),
    ClampMin(NodeId, F),
    Clamp(NodeId, F, F),
    /// Sum of all elements, producing a 0-d tensor.
    Sum(NodeId),
    /// Sum over the given axes, keeping them as size-1 dims.
    SumAxes(NodeId),
    Matmul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        pad: usize,
    },
    /// 2x2 max pooling, stride 2; per-output flat argmax into the input plane.
    MaxPool2(NodeId, Rc<Vec<u32>>),
    UpsampleBilinear2(NodeId),
    AdaptiveAvgPool(NodeId, usize),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: Rc<BatchNormStats<F>>,
    },
    Detach,
}

pub(crate) struct Node<F: Scalar> {
    pub value: Rc<ArrayD<F>>,
    pub op: Op<F>,
    pub requires_grad: bool,
}

/// Arena of eagerly evaluated tensor ops for one forward/backward pass.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> Tensor<'_, F> {
        // Reshape reinterprets the raw buffer, so every node value must be
        // standard layout. All op kernels uphold this; catch regressions here.
        debug_assert!(value.is_standard_layout(), "non-standard node layout");
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Tensor { id, graph: self }
    }

    pub(crate) fn value(&self, id: NodeId) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Insert a trainable leaf.
    pub fn param(&self, value: ArrayD<F>) -> Tensor<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a non-trainable leaf.
    pub fn constant(&self, value: ArrayD<F>) -> Tensor<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a 0-d constant.
    pub fn scalar(&self, value: F) -> Tensor<'_, F> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Run reverse-mode accumulation from a scalar root.
    ///
    /// Panics if the root is not 0-d.
    pub fn backward(&self, root: Tensor<'_, F>) -> Gradients<F> {
        assert_eq!(
            root.shape().len(),
            0,
            "backward root must be a scalar tensor"
        );
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));

        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            ops::backward_step(&nodes, id, &grad, &mut grads);
            if let Op::Leaf = nodes[id].op {
                grads[id] = Some(grad);
            }
        }
        Gradients { grads }
    }
}

/// Gradients of a backward pass, indexed by the tensors they belong to.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, t: Tensor<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: Tensor<'_, F>) -> Option<ArrayD<F>> {
        self.grads.get_mut(t.id).and_then(|g| g.take())
    }
}

/// Handle to a node in a [`Graph`].
pub struct Tensor<'g, F: Scalar> {
    pub(crate) id: NodeId,
    pub(crate) graph: &'g Graph<F>,
}

impl<F: Scalar> Clone for Tensor<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<F: Scalar> Copy for Tensor<'_, F> {}

impl<'g, F: Scalar> Tensor<'g, F> {
    pub fn value(&self) -> Rc<ArrayD<F>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Extract the element of a 0-d tensor.
    pub fn scalar_value(&self) -> F {
        let v = self.value();
        assert_eq!(v.ndim(), 0, "scalar_value on non-scalar tensor");
        *v.iter().next().expect("0-d tensor has one element")
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// The graph this tensor lives on, for building constants alongside it.
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }
}
