//! Elementwise arithmetic and shape manipulation.

use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{BackFn, GradSink, Tensor};
use crate::scalar::Scalar;

/// Sum `grad` down to `shape` (inverse of broadcasting `shape` up to grad's).
pub(crate) fn reduce_to<T: Scalar>(grad: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &target) in shape.iter().enumerate() {
        if target == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = &*a + &*b;
        let needs = self.needs_grad() || other.needs_grad();
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                if na {
                    sink.add(ia, g.clone());
                }
                if nb {
                    sink.add(ib, g.clone());
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out), needs, back, None)
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = &*a - &*b;
        let needs = self.needs_grad() || other.needs_grad();
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                if na {
                    sink.add(ia, g.clone());
                }
                if nb {
                    sink.add(ib, g.mapv(|v| -v));
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out), needs, back, None)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = &*a * &*b;
        let needs = self.needs_grad() || other.needs_grad();
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                if na {
                    sink.add(ia, g * &*b);
                }
                if nb {
                    sink.add(ib, g * &*a);
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out), needs, back, None)
    }

    /// Add a tensor broadcastable to this tensor's shape (trailing-aligned).
    pub fn add_broadcast(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        let bb = b
            .broadcast(a.raw_dim())
            .unwrap_or_else(|| panic!("add_broadcast: {:?} onto {:?}", b.shape(), a.shape()));
        let out = &*a + &bb;
        let needs = self.needs_grad() || other.needs_grad();
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let bshape = b.shape().to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                if na {
                    sink.add(ia, g.clone());
                }
                if nb {
                    sink.add(ib, reduce_to(g, &bshape));
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out), needs, back, None)
    }

    /// Multiply by a constant.
    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let c = T::from_f64x(factor);
        let out = self.value().mapv(|v| v * c);
        let needs = self.needs_grad();
        let ia = self.idx;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                sink.add(ia, g.mapv(|v| v * c));
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }

    /// Reinterpret the buffer with a new shape (same element count).
    pub fn reshape(&self, dims: &[usize]) -> Tensor<T> {
        let v = self.value();
        assert_eq!(
            v.len(),
            dims.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(dims))
            .expect("reshape");
        let needs = self.needs_grad();
        let ia = self.idx;
        let in_shape = v.shape().to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let gg = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape backward");
                sink.add(ia, gg);
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }

    /// Reorder axes (materializes a standard-layout copy).
    pub fn permute(&self, axes: &[usize]) -> Tensor<T> {
        let v = self.value();
        assert_eq!(axes.len(), v.ndim(), "permute: rank mismatch");
        let out = v
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let needs = self.needs_grad();
        let ia = self.idx;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let gg = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned();
                sink.add(ia, gg);
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }

    /// Keep `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let v = self.value();
        assert!(start + len <= v.shape()[axis], "narrow: out of range");
        let out = v
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let needs = self.needs_grad();
        let ia = self.idx;
        let in_shape = v.shape().to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                sink.add(ia, dx);
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }

    /// Mean over one axis (axis removed from the output shape).
    pub fn mean_axis(&self, axis: usize) -> Tensor<T> {
        let v = self.value();
        let n = v.shape()[axis];
        assert!(n > 0, "mean_axis: empty axis");
        let out = v.mean_axis(Axis(axis)).expect("mean_axis");
        let needs = self.needs_grad();
        let ia = self.idx;
        let in_shape = v.shape().to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let scale = T::from_f64x(1.0 / n as f64);
                let expanded = g
                    .clone()
                    .insert_axis(Axis(axis))
                    .broadcast(IxDyn(&in_shape))
                    .expect("mean_axis backward broadcast")
                    .mapv(|v| v * scale);
                sink.add(ia, expanded);
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }

    /// Mean over all elements, producing a 0-d tensor.
    pub fn mean_all(&self) -> Tensor<T> {
        let v = self.value();
        let n = v.len();
        assert!(n > 0, "mean_all: empty tensor");
        let mean = v.iter().fold(T::zero(), |acc, &x| acc + x) / T::from_f64x(n as f64);
        let out = super::scalar_array(mean);
        let needs = self.needs_grad();
        let ia = self.idx;
        let in_shape = v.shape().to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let gv = *g.iter().next().unwrap() / T::from_f64x(n as f64);
                sink.add(ia, ArrayD::from_elem(IxDyn(&in_shape), gv));
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }
}
