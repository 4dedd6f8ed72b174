//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and, when any parent
//! requires a gradient, a closure that maps the node's output gradient onto
//! its parents. Node ids grow monotonically, so the node vector is already in
//! topological order and backward is a single reverse sweep.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Recording context for one forward/backward pass.
///
/// Not `Sync`: each thread builds its own tape. Tensors stored on it are
/// immutable and cheap to share.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    track_decisions: bool,
    fingerprint: Cell<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            track_decisions: false,
            fingerprint: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    /// A tape that hashes every discrete branch taken by non-smooth ops
    /// (activation signs, argmax indices, sampling cells, clamps).
    ///
    /// Two evaluations with equal fingerprints lie on the same smooth piece
    /// of the function, which is what a finite-difference check needs.
    pub fn with_decision_tracking() -> Self {
        Tape {
            track_decisions: true,
            ..Self::new()
        }
    }

    pub fn tracks_decisions(&self) -> bool {
        self.track_decisions
    }

    /// Mixes a discrete decision into the fingerprint.
    #[inline]
    pub fn note(&self, v: u64) {
        if self.track_decisions {
            let h = self.fingerprint.get();
            self.fingerprint
                .set((h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(7));
        }
    }

    pub fn note_all(&self, values: impl IntoIterator<Item = u64>) {
        if self.track_decisions {
            for v in values {
                self.note(v);
            }
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an input. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records an op output. The backward closure is kept only if some
    /// parent requires a gradient.
    pub fn record<F>(&self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[T], &mut GradSink<'_, T>) + 'static,
    {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        self.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Borrowed view of a node's value, avoiding the `Arc` bump.
    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape().clone()
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradients of a scalar `loss` with respect to every node that
    /// requires one. Intermediate gradients are released as soon as they
    /// have been propagated; leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.dims().to_vec()));
        }
        let meta: Vec<(usize, bool)> = nodes
            .iter()
            .map(|n| (n.value.numel(), n.requires_grad))
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                meta: &meta,
            };
            backward(&g, &mut sink);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().clone()).collect();
        Ok(Grads { grads, shapes })
    }
}

/// Write access to parent gradients from inside a backward closure.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    meta: &'a [(usize, bool)],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.meta[v.0].1
    }

    /// Accumulation buffer for `v`, or `None` if `v` needs no gradient.
    pub fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        let (numel, wanted) = self.meta[v.0];
        if !wanted {
            return None;
        }
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); numel])
                .as_mut_slice(),
        )
    }

    /// Adds `g` elementwise into `v`'s gradient.
    pub fn add(&mut self, v: Var, g: &[T]) {
        if let Some(buf) = self.buf(v) {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Real> Grads<T> {
    /// Gradient of `v`; a node that was never reached gets zeros.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.shapes[v.0].numel()])
    }
}
