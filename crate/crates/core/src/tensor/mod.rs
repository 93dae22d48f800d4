//! Reverse-mode automatic differentiation over dynamic-dimension arrays.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! the materialized output value plus a one-shot backward closure. Calling
//! [`Graph::backward`] walks the nodes in reverse creation order,
//! accumulating gradients into the parents of each node and collecting the
//! gradients of parameter leaves by name. Graphs are built per step and
//! dropped afterwards; parameter values are shared into the graph as
//! reference-counted arrays, so a forward pass never copies weights.
//!
//! Operations live in submodules: elementwise/shape ops in [`ops`], matrix
//! products in [`linalg`], neural-network layers in [`nn`], convolutions and
//! adaptive pooling in [`conv`], losses in [`loss`].

pub mod conv;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<ArrayD<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    /// Add `contribution` to the gradient of node `idx`.
    pub fn add(&mut self, idx: usize, contribution: ArrayD<T>) {
        match &mut self.grads[idx] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contribution.shape());
                *existing += &contribution;
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

pub(crate) type BackFn<T> = Box<dyn FnOnce(&ArrayD<T>, &mut GradSink<'_, T>)>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    needs_grad: bool,
    backward: Option<BackFn<T>>,
    param: Option<Rc<str>>,
}

struct GraphInner<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    train: Cell<bool>,
    grad_enabled: Cell<bool>,
}

/// One forward pass's computation record.
pub struct Graph<T: Scalar> {
    inner: Rc<GraphInner<T>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Fresh graph in eval mode with gradients enabled.
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                nodes: RefCell::new(Vec::new()),
                train: Cell::new(false),
                grad_enabled: Cell::new(true),
            }),
        }
    }

    /// Training-mode toggle (dropout active, batch statistics in norms).
    pub fn set_train(&self, train: bool) {
        self.inner.train.set(train);
    }

    pub fn is_train(&self) -> bool {
        self.inner.train.get()
    }

    /// Disable gradient recording (backward closures are not allocated).
    pub fn set_grad_enabled(&self, enabled: bool) {
        self.inner.grad_enabled.set(enabled);
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.grad_enabled.get()
    }

    pub fn n_nodes(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    /// Leaf holding a constant (no gradient flows into it).
    pub fn constant(&self, value: ArrayD<T>) -> Tensor<T> {
        self.push(Rc::new(value), false, None, None)
    }

    /// Leaf sharing an existing array without copying.
    pub fn constant_shared(&self, value: Rc<ArrayD<T>>) -> Tensor<T> {
        self.push(value, false, None, None)
    }

    /// Parameter leaf; its gradient is collected under `name` by backward.
    pub fn param(&self, name: &str, value: Rc<ArrayD<T>>) -> Tensor<T> {
        let needs = self.grad_enabled();
        self.push(value, needs, None, needs.then(|| Rc::from(name)))
    }

    pub(crate) fn push(
        &self,
        value: Rc<ArrayD<T>>,
        needs_grad: bool,
        backward: Option<BackFn<T>>,
        param: Option<Rc<str>>,
    ) -> Tensor<T> {
        let mut nodes = self.inner.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            needs_grad,
            backward,
            param,
        });
        Tensor {
            graph: self.clone(),
            idx,
        }
    }

    /// Reverse pass from a scalar loss; returns parameter gradients by name.
    ///
    /// Consumes the recorded backward closures, so it can run once per graph.
    pub fn backward(&self, loss: &Tensor<T>) -> IndexMap<String, ArrayD<T>> {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.graph.inner),
            "loss belongs to a different graph"
        );
        assert_eq!(loss.value().len(), 1, "backward requires a scalar loss");
        let n = loss.idx + 1;
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        grads[loss.idx] = Some(ArrayD::from_elem(loss.value().raw_dim(), T::one()));

        let mut param_grads: IndexMap<String, ArrayD<T>> = IndexMap::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (backward, param) = {
                let mut nodes = self.inner.nodes.borrow_mut();
                (nodes[i].backward.take(), nodes[i].param.clone())
            };
            if let Some(name) = param {
                match param_grads.get_mut(name.as_ref()) {
                    Some(existing) => *existing += &g,
                    None => {
                        param_grads.insert(name.to_string(), g.clone());
                    }
                }
            }
            if let Some(f) = backward {
                let mut sink = GradSink {
                    grads: &mut grads[..i],
                };
                f(&g, &mut sink);
            }
        }
        param_grads
    }
}

/// Handle to one node of a [`Graph`].
pub struct Tensor<T: Scalar> {
    pub(crate) graph: Graph<T>,
    pub(crate) idx: usize,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            idx: self.idx,
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    /// Shared view of the node's value.
    pub fn value(&self) -> Rc<ArrayD<T>> {
        Rc::clone(&self.graph.inner.nodes.borrow()[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.value().ndim()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.value().shape()[axis]
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.inner.nodes.borrow()[self.idx].needs_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub(crate) fn same_graph(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.graph.inner, &other.graph.inner)
    }
}

/// 0-dimensional array helper for scalar losses.
pub fn scalar_array<T: Scalar>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}
