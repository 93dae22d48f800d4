//! Matrix products (gemm-backed) and the fused linear layer.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn};

use super::{BackFn, GradSink, Tensor};
use crate::scalar::Scalar;

pub(crate) fn view2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("2-d view")
}

/// c = a @ b for 2-d views (arbitrary strides; dispatches to gemm for f32/f64).
pub(crate) fn mm<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimension mismatch");
    let mut c = Array2::<T>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut c);
    c
}

impl<T: Scalar> Tensor<T> {
    /// 2-d matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-d");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-d");
        let out = mm(view2(&a), view2(&b)).into_dyn();
        let needs = self.needs_grad() || other.needs_grad();
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let g2 = view2(g);
                if na {
                    sink.add(ia, mm(g2, view2(&b).reversed_axes()).into_dyn());
                }
                if nb {
                    sink.add(ib, mm(view2(&a).reversed_axes(), g2).into_dyn());
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out), needs, back, None)
    }

    /// Batched matrix product over the leading axis: (B,M,K) @ (B,K,N),
    /// or (B,M,K) @ (B,N,K) with `transpose_rhs`.
    pub fn bmm(&self, other: &Tensor<T>, transpose_rhs: bool) -> Tensor<T> {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs 3-d");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs 3-d");
        let (nb_, m, k) = a3.dim();
        let (nb2, bd1, bd2) = b3.dim();
        assert_eq!(nb_, nb2, "bmm: batch mismatch");
        let n = if transpose_rhs {
            assert_eq!(bd2, k, "bmm: inner dimension mismatch");
            bd1
        } else {
            assert_eq!(bd1, k, "bmm: inner dimension mismatch");
            bd2
        };
        let mut out = ndarray::Array3::<T>::zeros((nb_, m, n));
        for i in 0..nb_ {
            let bi = if transpose_rhs {
                b3.index_axis(Axis(0), i).reversed_axes()
            } else {
                b3.index_axis(Axis(0), i)
            };
            general_mat_mul(
                T::one(),
                &a3.index_axis(Axis(0), i),
                &bi,
                T::zero(),
                &mut out.index_axis_mut(Axis(0), i),
            );
        }
        let needs = self.needs_grad() || other.needs_grad();
        let (ia, ib) = (self.idx, other.idx);
        let (na, nbg) = (self.needs_grad(), other.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
                if na {
                    // dA_i = dC_i @ B_i^T (or dC_i @ B_i when rhs was transposed)
                    let mut da = ndarray::Array3::<T>::zeros(a3.dim());
                    for i in 0..nb_ {
                        let bi = if transpose_rhs {
                            b3.index_axis(Axis(0), i)
                        } else {
                            b3.index_axis(Axis(0), i).reversed_axes()
                        };
                        general_mat_mul(
                            T::one(),
                            &g3.index_axis(Axis(0), i),
                            &bi,
                            T::zero(),
                            &mut da.index_axis_mut(Axis(0), i),
                        );
                    }
                    sink.add(ia, da.into_dyn());
                }
                if nbg {
                    // plain: dB_i = A_i^T @ dC_i; transposed: dB_i = dC_i^T @ A_i
                    let mut db = ndarray::Array3::<T>::zeros(b3.dim());
                    for i in 0..nb_ {
                        if transpose_rhs {
                            general_mat_mul(
                                T::one(),
                                &g3.index_axis(Axis(0), i).reversed_axes(),
                                &a3.index_axis(Axis(0), i),
                                T::zero(),
                                &mut db.index_axis_mut(Axis(0), i),
                            );
                        } else {
                            general_mat_mul(
                                T::one(),
                                &a3.index_axis(Axis(0), i).reversed_axes(),
                                &g3.index_axis(Axis(0), i),
                                T::zero(),
                                &mut db.index_axis_mut(Axis(0), i),
                            );
                        }
                    }
                    sink.add(ib, db.into_dyn());
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out.into_dyn()), needs, back, None)
    }

    /// Affine map on the last axis: y = x @ w^T + b with w of shape (O, K).
    ///
    /// Leading axes are flattened for the product and restored afterwards.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
        assert!(self.same_graph(weight));
        let x = self.value();
        let w = weight.value();
        assert_eq!(w.ndim(), 2, "linear: weight must be (out, in)");
        let k = *x.shape().last().expect("linear: input rank >= 1");
        let (o, wk) = (w.shape()[0], w.shape()[1]);
        assert_eq!(k, wk, "linear: input dim {k} != weight in-dim {wk}");
        let rows: usize = x.len() / k;
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, k))
            .unwrap();
        let mut y2 = mm(x2.view(), view2(&w).reversed_axes());
        let bv = bias.map(|b| {
            assert!(self.same_graph(b));
            b.value()
        });
        if let Some(b) = &bv {
            assert_eq!(b.shape(), [o], "linear: bias shape");
            let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y2 += &b1;
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = o;
        let out = y2.into_shape_with_order(IxDyn(&out_shape)).unwrap();

        let needs =
            self.needs_grad() || weight.needs_grad() || bias.map(|b| b.needs_grad()).unwrap_or(false);
        let (ix, iw) = (self.idx, weight.idx);
        let ib = bias.map(|b| b.idx);
        let (nx, nw) = (self.needs_grad(), weight.needs_grad());
        let nb = bias.map(|b| b.needs_grad()).unwrap_or(false);
        let in_shape = x.shape().to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let g2 = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((rows, o))
                    .unwrap();
                if nx {
                    let dx = mm(g2.view(), view2(&w))
                        .into_shape_with_order(IxDyn(&in_shape))
                        .unwrap();
                    sink.add(ix, dx);
                }
                if nw {
                    let x2 = x
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((rows, k))
                        .unwrap();
                    sink.add(iw, mm(g2.view().reversed_axes(), x2.view()).into_dyn());
                }
                if nb {
                    sink.add(ib.unwrap(), g2.sum_axis(Axis(0)).into_dyn());
                }
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }
}
