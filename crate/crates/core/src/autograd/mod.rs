//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] is built fresh for each forward pass. Ops append nodes holding
//! their output value plus whatever they need for the backward pass;
//! [`Graph::backward`] walks the nodes in reverse and accumulates gradients.

mod conv;
mod elementwise;
mod loss;
mod matmul;
mod norm;
mod shape;

pub use conv::PoolMode;
pub use elementwise::Activation;
pub use loss::CLAMP;
pub use norm::{BatchStats, BnMode};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d(conv::Conv2d),
    Pool(conv::Pool),
    Upsample2x { x: Var },
    Depthwise(conv::Depthwise<T>),
    LayerNorm(norm::LayerNorm<T>),
    BatchNorm(norm::BatchNorm<T>),
    Linear(matmul::Linear),
    MatMul(matmul::MatMul),
    Softmax { x: Var },
    Activate { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: T },
    AddConst { x: Var },
    ChannelScale { x: Var, s: Var },
    PixelGate { x: Var, m: Var },
    Gap { x: Var },
    Concat { a: Var, b: Var },
    Reshape { x: Var },
    Gather { x: Var, index: Vec<usize> },
    Bce { pred: Var, target: Vec<T> },
    Dice { pred: Var, target: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    shape_only: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            shape_only: false,
        }
    }

    /// A graph whose heavy ops (conv, linear, matmul, normalisation,
    /// broadcasts) validate and produce correctly shaped zero outputs without
    /// computing them. Used to trace the shape schedule of full-size models
    /// cheaply.
    pub fn shape_only() -> Self {
        Graph {
            shape_only: true,
            ..Self::new()
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push_raw(value, op, tracked)
    }

    /// Back-propagate from a scalar node. Gradients of every tracked node are
    /// retained and readable via [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads = Grads {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            tracked: self.nodes.iter().map(|n| n.tracked).collect(),
        };
        grads.slots[root.0] = Some(Tensor::full(self.shape(root), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads.slots[i] = Some(g);
        }
        self.grads = grads.slots;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut Grads<T>) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d(op) => op.backward(self, g, grads),
            Op::Pool(op) => op.backward(self, g, grads),
            Op::Upsample2x { x } => conv::upsample_backward(self, *x, g, grads),
            Op::Depthwise(op) => op.backward(self, g, grads),
            Op::LayerNorm(op) => op.backward(self, g, grads),
            Op::BatchNorm(op) => op.backward(self, g, grads),
            Op::Linear(op) => op.backward(self, g, grads),
            Op::MatMul(op) => op.backward(self, g, grads),
            Op::Softmax { x } => matmul::softmax_backward(*x, out, g, grads),
            Op::Activate { x, kind } => elementwise::activate_backward(self, *x, *kind, out, g, grads),
            Op::Add { a, b } => {
                grads.add(*a, || g.clone());
                grads.add(*b, || g.clone());
            }
            Op::Sub { a, b } => {
                grads.add(*a, || g.clone());
                grads.add(*b, || g.map(|v| -v));
            }
            Op::Mul { a, b } => elementwise::mul_backward(self, *a, *b, g, grads),
            Op::Scale { x, k } => grads.add(*x, || g.map(|v| v * *k)),
            Op::AddConst { x } => grads.add(*x, || g.clone()),
            Op::ChannelScale { x, s } => elementwise::channel_scale_backward(self, *x, *s, g, grads),
            Op::PixelGate { x, m } => elementwise::pixel_gate_backward(self, *x, *m, g, grads),
            Op::Gap { x } => elementwise::gap_backward(self, *x, g, grads),
            Op::Concat { a, b } => shape::concat_backward(self, *a, *b, g, grads),
            Op::Reshape { x } => grads.add(*x, || {
                Tensor::from_vec(self.shape(*x), g.data().to_vec()).expect("reshape grad")
            }),
            Op::Gather { x, index } => shape::gather_backward(self, *x, index, g, grads),
            Op::Bce { pred, target } => loss::bce_backward(self, *pred, target, g, grads),
            Op::Dice { pred, target } => loss::dice_backward(self, *pred, target, g, grads),
            Op::Sum { x } => {
                let gv = g.data()[0];
                grads.add(*x, || Tensor::full(self.shape(*x), gv))
            }
            Op::Mean { x } => {
                let n = self.shape(*x).numel();
                let gv = g.data()[0] / T::from_f64(n as f64);
                grads.add(*x, || Tensor::full(self.shape(*x), gv))
            }
        }
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }
}

/// Gradient accumulator used during one backward pass.
pub(crate) struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
    tracked: Vec<bool>,
}

impl<T: Element> Grads<T> {
    /// Accumulate the gradient produced by `make` into `v`; `make` only runs
    /// when `v` needs a gradient.
    pub(crate) fn add(&mut self, v: Var, make: impl FnOnce() -> Tensor<T>) {
        if !self.tracked[v.0] {
            return;
        }
        let d = make();
        match &mut self.slots[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.tracked[v.0]
    }
}
