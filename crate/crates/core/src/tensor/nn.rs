//! Activations, dropout, and normalization layers.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use super::{BackFn, GradSink, Tensor};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Contiguous (rows, last-dim) view of a standard-layout array.
fn lanes2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let d = *a.shape().last().expect("rank >= 1");
    let rows = a.len() / d;
    a.view()
        .into_shape_with_order((rows, d))
        .expect("standard layout")
}

fn lanes2_mut<T: Scalar>(a: &mut ArrayD<T>) -> ArrayViewMut2<'_, T> {
    let d = *a.shape().last().expect("rank >= 1");
    let rows = a.len() / d;
    a.view_mut()
        .into_shape_with_order((rows, d))
        .expect("standard layout")
}

impl<T: Scalar> Tensor<T> {
    /// Exact (erf-based) Gaussian error linear unit.
    pub fn gelu(&self) -> Tensor<T> {
        let x = self.value();
        let out = x.mapv(|v| {
            let vf = v.to_f64x();
            T::from_f64x(0.5 * vf * (1.0 + libm::erf(vf * std::f64::consts::FRAC_1_SQRT_2)))
        });
        let needs = self.needs_grad();
        let ia = self.idx;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let mut d = x.mapv(|v| {
                    let vf = v.to_f64x();
                    let phi = 0.5 * (1.0 + libm::erf(vf * std::f64::consts::FRAC_1_SQRT_2));
                    let pdf = INV_SQRT_2PI * (-0.5 * vf * vf).exp();
                    T::from_f64x(phi + vf * pdf)
                });
                d *= g;
                sink.add(ia, d);
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&self) -> Tensor<T> {
        let x = self.value();
        let out = Rc::new(x.mapv(|v| T::from_f64x(1.0 / (1.0 + (-v.to_f64x()).exp()))));
        let needs = self.needs_grad();
        let ia = self.idx;
        let y = Rc::clone(&out);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let mut d = y.mapv(|v| v * (T::one() - v));
                d *= g;
                sink.add(ia, d);
            }) as BackFn<T>
        });
        self.graph.push(out, needs, back, None)
    }

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Tensor<T> {
        let x = self.value();
        let mut out = x.as_standard_layout().into_owned();
        {
            let mut y2 = lanes2_mut(&mut out);
            for mut row in y2.rows_mut() {
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = T::from_f64x((v.to_f64x() - max.to_f64x()).exp());
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        let out = Rc::new(out);
        let needs = self.needs_grad();
        let ia = self.idx;
        let y = Rc::clone(&out);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let mut dx = (&*y) * g;
                {
                    let y2 = lanes2(&y);
                    let g2 = lanes2(g);
                    let mut dx2 = lanes2_mut(&mut dx);
                    for r in 0..y2.nrows() {
                        let dot = y2
                            .row(r)
                            .iter()
                            .zip(g2.row(r).iter())
                            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        let yrow = y2.row(r);
                        for (v, &yv) in dx2.row_mut(r).iter_mut().zip(yrow.iter()) {
                            *v = *v - yv * dot;
                        }
                    }
                }
                sink.add(ia, dx);
            }) as BackFn<T>
        });
        self.graph.push(out, needs, back, None)
    }

    /// Inverted dropout; identity when the graph is in eval mode or p = 0.
    ///
    /// Mask draws come from `rng` in row-major element order, so a cloned
    /// stream replays the exact same mask.
    pub fn dropout(&self, p: f64, rng: &mut RngStream) -> Tensor<T> {
        assert!((0.0..1.0).contains(&p), "dropout probability in [0,1)");
        if !self.graph.is_train() || p == 0.0 {
            return self.clone();
        }
        let x = self.value();
        let keep_scale = T::from_f64x(1.0 / (1.0 - p));
        let mask = Rc::new(ArrayD::from_shape_fn(x.raw_dim(), |_| {
            if rng.uniform(0.0, 1.0) < p {
                T::zero()
            } else {
                keep_scale
            }
        }));
        let out = &*x * &*mask;
        let needs = self.needs_grad();
        let ia = self.idx;
        let back: Option<BackFn<T>> = needs.then(|| {
            let mask = Rc::clone(&mask);
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                sink.add(ia, g * &*mask);
            }) as BackFn<T>
        });
        self.graph.push(Rc::new(out), needs, back, None)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
        assert!(self.same_graph(gamma) && self.same_graph(beta));
        let x = self.value();
        let d = *x.shape().last().expect("layer_norm rank >= 1");
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), [d], "layer_norm: gamma shape");
        assert_eq!(bv.shape(), [d], "layer_norm: beta shape");
        let rows = x.len() / d;
        let epst = T::from_f64x(eps);
        let x2 = lanes2(&x);
        let mut xhat = Array2::<T>::zeros((rows, d));
        let mut rstd = Array1::<T>::zeros(rows);
        let inv_d = T::from_f64x(1.0 / d as f64);
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let rs = T::one() / (var + epst).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * rs;
            }
        }
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let y2 = &xhat * &g1 + &b1;
        let out = y2.into_shape_with_order(IxDyn(x.shape())).unwrap();
        let xhat = Rc::new(xhat);
        let rstd = Rc::new(rstd);

        let needs = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        let (ix, ig, ib) = (self.idx, gamma.idx, beta.idx);
        let (nx, ng, nb) = (self.needs_grad(), gamma.needs_grad(), beta.needs_grad());
        let in_shape = x.shape().to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let g2 = lanes2(g);
                let gamma1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if ng {
                    let mut dg = Array1::<T>::zeros(d);
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g2[(r, c)] * xhat[(r, c)];
                        }
                    }
                    sink.add(ig, dg.into_dyn());
                }
                if nb {
                    sink.add(ib, g2.sum_axis(Axis(0)).into_dyn());
                }
                if nx {
                    let inv_d = T::from_f64x(1.0 / d as f64);
                    let mut dx = Array2::<T>::zeros((rows, d));
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let gg = g2[(r, c)] * gamma1[c];
                            m1 += gg;
                            m2 += gg * xhat[(r, c)];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let rs = rstd[r];
                        for c in 0..d {
                            let gg = g2[(r, c)] * gamma1[c];
                            dx[(r, c)] = rs * (gg - m1 - xhat[(r, c)] * m2);
                        }
                    }
                    sink.add(ix, dx.into_shape_with_order(IxDyn(&in_shape)).unwrap().into_dyn());
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out), needs, back, None)
    }

    /// Group normalization over (B, F, C, T) with `groups` dividing F;
    /// statistics are computed per (sample, group) over (F/groups)·C·T
    /// elements, with per-feature affine parameters.
    pub fn group_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        groups: usize,
        eps: f64,
    ) -> Tensor<T> {
        assert!(self.same_graph(gamma) && self.same_graph(beta));
        let x = self.value();
        assert_eq!(x.ndim(), 4, "group_norm expects (B, F, C, T)");
        let (b, f) = (x.shape()[0], x.shape()[1]);
        assert!(groups >= 1 && f % groups == 0, "groups must divide F");
        let fg = f / groups;
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), [f], "group_norm: gamma shape");
        assert_eq!(bv.shape(), [f], "group_norm: beta shape");
        let epst = T::from_f64x(eps);

        let mut xhat = x.as_standard_layout().into_owned();
        let mut rstd = Array2::<T>::zeros((b, groups));
        for bi in 0..b {
            for gi in 0..groups {
                let mut region = xhat.slice_mut(ndarray::s![
                    bi,
                    gi * fg..(gi + 1) * fg,
                    ..,
                    ..
                ]);
                let n = T::from_f64x(region.len() as f64);
                let mean = region.iter().fold(T::zero(), |a, &v| a + v) / n;
                let var = region
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / n;
                let rs = T::one() / (var + epst).sqrt();
                rstd[(bi, gi)] = rs;
                region.mapv_inplace(|v| (v - mean) * rs);
            }
        }
        let mut out = xhat.clone();
        for fi in 0..f {
            let (gn, bt) = (gv[[fi]], bv[[fi]]);
            out.slice_mut(ndarray::s![.., fi, .., ..])
                .mapv_inplace(|v| v * gn + bt);
        }
        let xhat = Rc::new(xhat);
        let rstd = Rc::new(rstd);

        let needs = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        let (ix, ig, ibta) = (self.idx, gamma.idx, beta.idx);
        let (nx, ng, nb) = (self.needs_grad(), gamma.needs_grad(), beta.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                if ng {
                    let mut dg = Array1::<T>::zeros(f);
                    for fi in 0..f {
                        let gs = g.slice(ndarray::s![.., fi, .., ..]);
                        let xs = xhat.slice(ndarray::s![.., fi, .., ..]);
                        dg[fi] = gs
                            .iter()
                            .zip(xs.iter())
                            .fold(T::zero(), |a, (&p, &q)| a + p * q);
                    }
                    sink.add(ig, dg.into_dyn());
                }
                if nb {
                    let mut db = Array1::<T>::zeros(f);
                    for fi in 0..f {
                        db[fi] = g
                            .slice(ndarray::s![.., fi, .., ..])
                            .iter()
                            .fold(T::zero(), |a, &p| a + p);
                    }
                    sink.add(ibta, db.into_dyn());
                }
                if nx {
                    let mut dx = ArrayD::<T>::zeros(g.raw_dim());
                    for bi in 0..b {
                        for gi in 0..groups {
                            let gslice =
                                g.slice(ndarray::s![bi, gi * fg..(gi + 1) * fg, .., ..]);
                            let xslice =
                                xhat.slice(ndarray::s![bi, gi * fg..(gi + 1) * fg, .., ..]);
                            let n = T::from_f64x(gslice.len() as f64);
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            let mut ggbuf =
                                ndarray::Array3::<T>::zeros(gslice.dim());
                            for fi in 0..fg {
                                let gn = gv[[gi * fg + fi]];
                                let gsub = gslice.index_axis(Axis(0), fi);
                                let xsub = xslice.index_axis(Axis(0), fi);
                                let mut gbuf = ggbuf.index_axis_mut(Axis(0), fi);
                                for ((o, &p), &q) in
                                    gbuf.iter_mut().zip(gsub.iter()).zip(xsub.iter())
                                {
                                    let gg = p * gn;
                                    *o = gg;
                                    m1 += gg;
                                    m2 += gg * q;
                                }
                            }
                            m1 /= n;
                            m2 /= n;
                            let rs = rstd[(bi, gi)];
                            let mut dslice =
                                dx.slice_mut(ndarray::s![bi, gi * fg..(gi + 1) * fg, .., ..]);
                            for ((o, &gg), &q) in dslice
                                .iter_mut()
                                .zip(ggbuf.iter())
                                .zip(xslice.iter())
                            {
                                *o = rs * (gg - m1 - q * m2);
                            }
                        }
                    }
                    sink.add(ix, dx);
                }
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(out), needs, back, None)
    }

    /// Per-tap weight normalization for a (O, I, K) kernel: the direction
    /// tensor `v` is normalized over (O, I) separately for each tap k and
    /// scaled by the per-tap gain g[k].
    pub fn weight_norm_per_tap(v: &Tensor<T>, gain: &Tensor<T>) -> Tensor<T> {
        assert!(v.same_graph(gain));
        let vv = v.value();
        let gv = gain.value();
        assert_eq!(vv.ndim(), 3, "weight_norm: v must be (O, I, K)");
        let k = vv.shape()[2];
        assert_eq!(gv.shape(), [k], "weight_norm: gain shape");
        let mut norms = Array1::<T>::zeros(k);
        for ki in 0..k {
            let sl = vv.slice(ndarray::s![.., .., ki]);
            let ssq = sl.iter().fold(T::zero(), |a, &x| a + x * x);
            norms[ki] = ssq.sqrt();
            assert!(norms[ki] > T::zero(), "weight_norm: zero-norm tap");
        }
        let mut w = vv.as_standard_layout().into_owned();
        for ki in 0..k {
            let s = gv[[ki]] / norms[ki];
            w.slice_mut(ndarray::s![.., .., ki]).mapv_inplace(|x| x * s);
        }
        let norms = Rc::new(norms);
        let needs = v.needs_grad() || gain.needs_grad();
        let (iv, ig) = (v.idx, gain.idx);
        let (nv, ng) = (v.needs_grad(), gain.needs_grad());
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                // S_k = <dW_k, v_k> drives both gradients.
                let mut s = Array1::<T>::zeros(k);
                for ki in 0..k {
                    let gw = g.slice(ndarray::s![.., .., ki]);
                    let vk = vv.slice(ndarray::s![.., .., ki]);
                    s[ki] = gw
                        .iter()
                        .zip(vk.iter())
                        .fold(T::zero(), |a, (&p, &q)| a + p * q);
                }
                if ng {
                    let mut dg = Array1::<T>::zeros(k);
                    for ki in 0..k {
                        dg[ki] = s[ki] / norms[ki];
                    }
                    sink.add(ig, dg.into_dyn());
                }
                if nv {
                    let mut dv = ArrayD::<T>::zeros(vv.raw_dim());
                    for ki in 0..k {
                        let scale = gv[[ki]] / norms[ki];
                        let correction = gv[[ki]] * s[ki] / (norms[ki] * norms[ki] * norms[ki]);
                        let gw = g.slice(ndarray::s![.., .., ki]);
                        let vk = vv.slice(ndarray::s![.., .., ki]);
                        let mut dslice = dv.slice_mut(ndarray::s![.., .., ki]);
                        for ((o, &p), &q) in dslice.iter_mut().zip(gw.iter()).zip(vk.iter()) {
                            *o = scale * p - correction * q;
                        }
                    }
                    sink.add(iv, dv);
                }
            }) as BackFn<T>
        });
        v.graph.push(Rc::new(w), needs, back, None)
    }
}

/// Batch normalization over (B, D) using batch statistics.
///
/// Returns the normalized tensor plus the biased batch mean/variance so the
/// caller can maintain running statistics. Errors when B < 2: batch
/// statistics are undefined for a single sample.
pub fn batch_norm1d_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Array1<T>, Array1<T>)> {
    assert!(x.same_graph(gamma) && x.same_graph(beta));
    let xv = x.value();
    assert_eq!(xv.ndim(), 2, "batch_norm1d expects (B, D)");
    let (b, d) = (xv.shape()[0], xv.shape()[1]);
    if b < 2 {
        return Err(CoreError::validation(
            "batch normalization in training mode requires batch size >= 2",
        ));
    }
    let gv = gamma.value();
    let bv = beta.value();
    assert_eq!(gv.shape(), [d]);
    assert_eq!(bv.shape(), [d]);
    let epst = T::from_f64x(eps);
    let inv_b = T::from_f64x(1.0 / b as f64);
    let x2 = xv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut mean = Array1::<T>::zeros(d);
    let mut var = Array1::<T>::zeros(d);
    for c in 0..d {
        let col = x2.column(c);
        let m = col.iter().fold(T::zero(), |a, &v| a + v) * inv_b;
        let vv = col.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) * inv_b;
        mean[c] = m;
        var[c] = vv;
    }
    let mut xhat = Array2::<T>::zeros((b, d));
    let mut rstd = Array1::<T>::zeros(d);
    for c in 0..d {
        let rs = T::one() / (var[c] + epst).sqrt();
        rstd[c] = rs;
        for r in 0..b {
            xhat[(r, c)] = (x2[(r, c)] - mean[c]) * rs;
        }
    }
    let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let out = (&xhat * &g1 + &b1).into_dyn();
    let xhat = Rc::new(xhat);
    let rstd = Rc::new(rstd);

    let needs = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    let (ix, ig, ibt) = (x.idx, gamma.idx, beta.idx);
    let (nx, ng, nb) = (x.needs_grad(), gamma.needs_grad(), beta.needs_grad());
    let back: Option<BackFn<T>> = needs.then(|| {
        let xhat = Rc::clone(&xhat);
        let rstd = Rc::clone(&rstd);
        Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let gamma1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            if ng {
                let mut dg = Array1::<T>::zeros(d);
                for c in 0..d {
                    for r in 0..b {
                        dg[c] += g2[(r, c)] * xhat[(r, c)];
                    }
                }
                sink.add(ig, dg.into_dyn());
            }
            if nb {
                sink.add(ibt, g2.sum_axis(Axis(0)).into_dyn());
            }
            if nx {
                let inv_b = T::from_f64x(1.0 / b as f64);
                let mut dx = Array2::<T>::zeros((b, d));
                for c in 0..d {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for r in 0..b {
                        let gg = g2[(r, c)] * gamma1[c];
                        m1 += gg;
                        m2 += gg * xhat[(r, c)];
                    }
                    m1 *= inv_b;
                    m2 *= inv_b;
                    for r in 0..b {
                        let gg = g2[(r, c)] * gamma1[c];
                        dx[(r, c)] = rstd[c] * (gg - m1 - xhat[(r, c)] * m2);
                    }
                }
                sink.add(ix, dx.into_dyn());
            }
        }) as BackFn<T>
    });
    let t = x
        .graph
        .push(Rc::new(out), needs, back, None);
    Ok((t, mean, var))
}

/// Batch normalization over (B, D) using fixed (running) statistics.
pub fn batch_norm1d_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &ArrayD<T>,
    running_var: &ArrayD<T>,
    eps: f64,
) -> Tensor<T> {
    assert!(x.same_graph(gamma) && x.same_graph(beta));
    let xv = x.value();
    assert_eq!(xv.ndim(), 2, "batch_norm1d expects (B, D)");
    let (b, d) = (xv.shape()[0], xv.shape()[1]);
    assert_eq!(running_mean.shape(), [d]);
    assert_eq!(running_var.shape(), [d]);
    let gv = gamma.value();
    let bv = beta.value();
    let epst = T::from_f64x(eps);
    let x2 = xv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut rstd = Array1::<T>::zeros(d);
    let mut xhat = Array2::<T>::zeros((b, d));
    for c in 0..d {
        let rs = T::one() / (running_var[[c]] + epst).sqrt();
        rstd[c] = rs;
        let m = running_mean[[c]];
        for r in 0..b {
            xhat[(r, c)] = (x2[(r, c)] - m) * rs;
        }
    }
    let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let out = (&xhat * &g1 + &b1).into_dyn();
    let xhat = Rc::new(xhat);
    let rstd = Rc::new(rstd);

    let needs = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    let (ix, ig, ibt) = (x.idx, gamma.idx, beta.idx);
    let (nx, ng, nb) = (x.needs_grad(), gamma.needs_grad(), beta.needs_grad());
    let back: Option<BackFn<T>> = needs.then(|| {
        Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let gamma1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            if ng {
                let mut dg = Array1::<T>::zeros(d);
                for c in 0..d {
                    for r in 0..b {
                        dg[c] += g2[(r, c)] * xhat[(r, c)];
                    }
                }
                sink.add(ig, dg.into_dyn());
            }
            if nb {
                sink.add(ibt, g2.sum_axis(Axis(0)).into_dyn());
            }
            if nx {
                let mut dx = Array2::<T>::zeros((b, d));
                for c in 0..d {
                    for r in 0..b {
                        dx[(r, c)] = g2[(r, c)] * gamma1[c] * rstd[c];
                    }
                }
                sink.add(ix, dx.into_dyn());
            }
        }) as BackFn<T>
    });
    x.graph
        .push(Rc::new(out), needs, back, None)
}

/// Split (B, L, D) into (B·H, L, D/H) head-major batches for attention.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, n_heads: usize) -> Tensor<T> {
    let (b, l, d) = {
        let v = x.value();
        assert_eq!(v.ndim(), 3, "split_heads expects (B, L, D)");
        (v.shape()[0], v.shape()[1], v.shape()[2])
    };
    assert_eq!(d % n_heads, 0, "embed dim not divisible by heads");
    let dh = d / n_heads;
    x.reshape(&[b, l, n_heads, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b * n_heads, l, dh])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(x: &Tensor<T>, n_heads: usize) -> Tensor<T> {
    let (bh, l, dh) = {
        let v = x.value();
        assert_eq!(v.ndim(), 3, "merge_heads expects (B·H, L, D/H)");
        (v.shape()[0], v.shape()[1], v.shape()[2])
    };
    assert_eq!(bh % n_heads, 0);
    let b = bh / n_heads;
    x.reshape(&[b, n_heads, l, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, l, n_heads * dh])
}

