//! Convolutions and adaptive average pooling.
//!
//! Two convolution shapes cover the whole encoder:
//!
//! * [`Tensor::conv_time_k2s2`] — the feature-encoder stage: a 2-d
//!   convolution whose kernel spans only the time axis (kernel (1,2),
//!   stride (1,2)), so signal channels never mix. Implemented as an
//!   im2col gather plus one gemm; because stride equals kernel width the
//!   backward scatter is disjoint.
//! * [`Tensor::conv1d_grouped`] — the positional encoder: a grouped 1-d
//!   convolution with symmetric zero padding, stride 1.
//! * [`Tensor::dap_pool`] — adaptive average pooling that folds the
//!   channel axis and resamples the time axis to a fixed length.

use std::rc::Rc;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayView4, Ix3, Ix4};

use super::linalg::mm;
use super::{BackFn, GradSink, Tensor};
use crate::scalar::Scalar;

fn view4<T: Scalar>(x: &ArrayD<T>) -> ArrayView4<'_, T> {
    x.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-d tensor")
}

fn view3<T: Scalar>(x: &ArrayD<T>) -> ArrayView3<'_, T> {
    x.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a 3-d tensor")
}

/// im2col for kernel 2 / stride 2 over the trailing axis of (B, Fin, C, T):
/// rows indexed by (input-feature, tap), columns by (b, c, t_out).
fn im2col_k2s2<T: Scalar>(x: ArrayView4<'_, T>, t_out: usize) -> Array2<T> {
    let (b, fin, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<T>::zeros((fin * 2, b * c * t_out));
    let mut buf = Vec::with_capacity(b * c * t_out);
    for i in 0..fin {
        for k in 0..2 {
            buf.clear();
            let sl = x.slice(s![.., i, .., k..; 2]);
            let sl = sl.slice(s![.., .., ..t_out]);
            buf.extend(sl.iter().cloned());
            cols.row_mut(i * 2 + k)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&buf);
        }
    }
    cols
}

/// im2col for one group of a padded (B, D, Lp) input with kernel K,
/// stride 1: rows indexed by (in-channel-local, tap), columns by (b, t_out).
fn im2col_grouped<T: Scalar>(
    xp: &Array3<T>,
    c_start: usize,
    c_g: usize,
    kernel: usize,
    l_out: usize,
) -> Array2<T> {
    let b = xp.shape()[0];
    let mut cols = Array2::<T>::zeros((c_g * kernel, b * l_out));
    let mut buf = Vec::with_capacity(b * l_out);
    for ic in 0..c_g {
        for k in 0..kernel {
            buf.clear();
            let sl = xp.slice(s![.., c_start + ic, k..k + l_out]);
            buf.extend(sl.iter().cloned());
            cols.row_mut(ic * kernel + k)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&buf);
        }
    }
    cols
}

impl<T: Scalar> Tensor<T> {
    /// Channel-independent temporal convolution: input (B, Fin, C, T),
    /// weight (Fout, Fin, 2), stride 2, no bias → (B, Fout, C, floor(T/2)).
    pub fn conv_time_k2s2(&self, weight: &Tensor<T>) -> Tensor<T> {
        assert!(self.same_graph(weight));
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 4, "conv_time_k2s2 expects (B, Fin, C, T)");
        assert_eq!(w.ndim(), 3, "conv_time_k2s2 weight (Fout, Fin, 2)");
        let (b, fin, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (fout, wfin, wk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        assert_eq!(fin, wfin, "conv_time_k2s2: feature dim mismatch");
        assert_eq!(wk, 2, "conv_time_k2s2: kernel width must be 2");
        assert!(t >= 2, "conv_time_k2s2: time axis too short");
        let t_out = t / 2;

        let cols = im2col_k2s2(view4(&x), t_out);
        let w2 = view3(&w)
            .into_shape_with_order((fout, fin * 2))
            .expect("weight standard layout");
        let out2 = mm(w2, cols.view()); // (Fout, B·C·T_out)
        let out = out2
            .into_shape_with_order((fout, b, c, t_out))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_dyn();

        let needs = self.needs_grad() || weight.needs_grad();
        let (ix, iw) = (self.idx, weight.idx);
        let (nx, nw) = (self.needs_grad(), weight.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                // (B, Fout, C, To) → (Fout, B·C·To)
                let g2 = view4(g)
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((fout, b * c * t_out))
                    .unwrap();
                if nw {
                    let cols = im2col_k2s2(view4(&x), t_out);
                    let dw2 = mm(g2.view(), cols.view().reversed_axes());
                    sink.add(iw, dw2.into_shape_with_order((fout, fin, 2)).unwrap().into_dyn());
                }
                if nx {
                    let w2 = view3(&w).into_shape_with_order((fout, fin * 2)).unwrap();
                    let dcols = mm(w2.reversed_axes(), g2.view()); // (Fin·2, B·C·To)
                    let mut dx = Array4::<T>::zeros((b, fin, c, t));
                    for i in 0..fin {
                        for k in 0..2 {
                            let row = dcols.row(i * 2 + k);
                            let row = row
                                .into_shape_with_order((b, c, t_out))
                                .expect("contiguous row");
                            // stride == kernel ⇒ each input sample feeds one tap
                            let mut target = dx.slice_mut(s![.., i, .., k..; 2]);
                            let mut target = target.slice_mut(s![.., .., ..t_out]);
                            target.assign(&row);
                        }
                    }
                    sink.add(ix, dx.into_dyn());
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out), needs, back, None)
    }

    /// Grouped 1-d convolution with symmetric zero padding and stride 1:
    /// input (B, D, L), weight (D, D/groups, K), bias (D) →
    /// (B, D, L + 2·pad − K + 1).
    pub fn conv1d_grouped(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        pad: usize,
        groups: usize,
    ) -> Tensor<T> {
        assert!(self.same_graph(weight) && self.same_graph(bias));
        let x = self.value();
        let w = weight.value();
        let bv = bias.value();
        assert_eq!(x.ndim(), 3, "conv1d_grouped expects (B, D, L)");
        let (b, d, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (wd, cg, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        assert_eq!(wd, d, "conv1d_grouped: out-channel count");
        assert!(groups >= 1 && d % groups == 0, "groups must divide channel count");
        assert_eq!(cg, d / groups, "conv1d_grouped: in-channels per group");
        assert_eq!(bv.shape(), [d], "conv1d_grouped: bias shape");
        let lp = l + 2 * pad;
        assert!(lp >= kernel, "conv1d_grouped: input too short");
        let l_out = lp - kernel + 1;

        let mut xp = Array3::<T>::zeros((b, d, lp));
        xp.slice_mut(s![.., .., pad..pad + l]).assign(&view3(&x));

        let og = d / groups; // out channels per group == in channels per group
        let mut out = Array3::<T>::zeros((b, d, l_out));
        for gi in 0..groups {
            let cols = im2col_grouped(&xp, gi * og, og, kernel, l_out);
            let wg = view3(&w);
            let wg = wg.slice(s![gi * og..(gi + 1) * og, .., ..]);
            let wg2 = wg
                .into_shape_with_order((og, og * kernel))
                .expect("contiguous group weights");
            let og2 = mm(wg2, cols.view()); // (og, B·L_out)
            let og3 = og2.into_shape_with_order((og, b, l_out)).unwrap();
            out.slice_mut(s![.., gi * og..(gi + 1) * og, ..])
                .assign(&og3.permuted_axes([1, 0, 2]));
        }
        for ci in 0..d {
            let bc = bv[[ci]];
            out.slice_mut(s![.., ci, ..]).mapv_inplace(|v| v + bc);
        }

        let needs = self.needs_grad() || weight.needs_grad() || bias.needs_grad();
        let (ix, iw, ib) = (self.idx, weight.idx, bias.idx);
        let (nx, nw, nb) = (self.needs_grad(), weight.needs_grad(), bias.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let g3 = view3(g);
                if nb {
                    let mut db = Array1::<T>::zeros(d);
                    for ci in 0..d {
                        db[ci] = g3
                            .slice(s![.., ci, ..])
                            .iter()
                            .fold(T::zero(), |a, &p| a + p);
                    }
                    sink.add(ib, db.into_dyn());
                }
                let xp = nw.then(|| {
                    let mut xp = Array3::<T>::zeros((b, d, lp));
                    xp.slice_mut(s![.., .., pad..pad + l]).assign(&view3(&x));
                    xp
                });
                let mut dxp = nx.then(|| Array3::<T>::zeros((b, d, lp)));
                let mut dw = nw.then(|| Array3::<T>::zeros((d, og, kernel)));
                for gi in 0..groups {
                    // (og, B·L_out) slice of the output gradient
                    let gg = g3
                        .slice(s![.., gi * og..(gi + 1) * og, ..])
                        .permuted_axes([1, 0, 2])
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((og, b * l_out))
                        .unwrap();
                    if let Some(dw) = dw.as_mut() {
                        let cols =
                            im2col_grouped(xp.as_ref().unwrap(), gi * og, og, kernel, l_out);
                        let dwg = mm(gg.view(), cols.view().reversed_axes()); // (og, og·K)
                        let dwg = dwg.into_shape_with_order((og, og, kernel)).unwrap();
                        dw.slice_mut(s![gi * og..(gi + 1) * og, .., ..]).assign(&dwg);
                    }
                    if let Some(dxp) = dxp.as_mut() {
                        let wv = view3(&w);
                        let wg = wv.slice(s![gi * og..(gi + 1) * og, .., ..]);
                        let wg2 = wg.into_shape_with_order((og, og * kernel)).unwrap();
                        let dcols = mm(wg2.reversed_axes(), gg.view()); // (og·K, B·L_out)
                        for ic in 0..og {
                            for k in 0..kernel {
                                let row = dcols.row(ic * kernel + k);
                                let row = row.into_shape_with_order((b, l_out)).unwrap();
                                let mut tgt =
                                    dxp.slice_mut(s![.., gi * og + ic, k..k + l_out]);
                                tgt += &row;
                            }
                        }
                    }
                }
                if let Some(dxp) = dxp {
                    let dx = dxp.slice(s![.., .., pad..pad + l]).to_owned();
                    sink.add(ix, dx.into_dyn());
                }
                if let Some(dw) = dw {
                    sink.add(iw, dw.into_dyn());
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out.into_dyn()), needs, back, None)
    }

    /// Dimension-adaptive average pooling: (B, F, C, T) → (B, F, L).
    ///
    /// The channel axis is always averaged away in full; the time axis is
    /// pooled with the adaptive bin rule bin(l) = [⌊l·T/L⌋, ⌈(l+1)·T/L⌉).
    /// When T == L the time bins are singletons.
    pub fn dap_pool(&self, out_len: usize) -> Tensor<T> {
        assert!(out_len >= 1, "dap_pool: out_len >= 1");
        let x = self.value();
        assert_eq!(x.ndim(), 4, "dap_pool expects (B, F, C, T)");
        let (b, f, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert!(c >= 1 && t >= 1, "dap_pool: empty input");
        let bins: Vec<(usize, usize)> = (0..out_len)
            .map(|l| {
                let start = l * t / out_len;
                let end = ((l + 1) * t).div_ceil(out_len);
                (start, end)
            })
            .collect();
        let x4 = view4(&x);
        let mut out = Array3::<T>::zeros((b, f, out_len));
        for (l, &(s0, e0)) in bins.iter().enumerate() {
            let n = T::from_f64x((c * (e0 - s0)) as f64);
            for bi in 0..b {
                for fi in 0..f {
                    let sum = x4
                        .slice(s![bi, fi, .., s0..e0])
                        .iter()
                        .fold(T::zero(), |a, &v| a + v);
                    out[(bi, fi, l)] = sum / n;
                }
            }
        }
        let needs = self.needs_grad();
        let ix = self.idx;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let g3 = view3(g);
                let mut dx = Array4::<T>::zeros((b, f, c, t));
                for (l, &(s0, e0)) in bins.iter().enumerate() {
                    let inv = T::from_f64x(1.0 / ((c * (e0 - s0)) as f64));
                    for bi in 0..b {
                        for fi in 0..f {
                            let gv = g3[(bi, fi, l)] * inv;
                            dx.slice_mut(s![bi, fi, .., s0..e0])
                                .mapv_inplace(|v| v + gv);
                        }
                    }
                }
                sink.add(ix, dx.into_dyn());
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out.into_dyn()), needs, back, None)
    }
}
