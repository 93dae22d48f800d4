//! Loss heads: row normalization, the contrastive objective used for
//! pretraining, and binary cross-entropy over probabilities.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayView2, Ix2};

use super::{scalar_array, BackFn, GradSink, Tensor};
use crate::scalar::Scalar;

fn view2<T: Scalar>(x: &ArrayD<T>) -> ArrayView2<'_, T> {
    x.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

impl<T: Scalar> Tensor<T> {
    /// Normalize each row of a (R, P) matrix to unit Euclidean norm.
    ///
    /// Panics if any row has zero norm (callers validate their inputs for
    /// finiteness and non-degeneracy before projecting).
    pub fn l2_normalize_rows(&self) -> Tensor<T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "l2_normalize_rows expects (R, P)");
        let xv = view2(&x);
        let (r, p) = (xv.nrows(), xv.ncols());
        let mut y = Array2::<T>::zeros((r, p));
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = xv.row(i).iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            assert!(n > T::zero(), "l2_normalize_rows: zero-norm row {i}");
            norms.push(n);
            let inv = T::one() / n;
            for j in 0..p {
                y[(i, j)] = xv[(i, j)] * inv;
            }
        }
        let yv = Rc::new(y.into_dyn());
        let needs = self.needs_grad();
        let ix = self.idx;
        let y_saved = Rc::clone(&yv);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let gv = view2(g);
                let ys = view2(&y_saved);
                let mut dx = Array2::<T>::zeros((r, p));
                for i in 0..r {
                    let dot = gv
                        .row(i)
                        .iter()
                        .zip(ys.row(i).iter())
                        .fold(T::zero(), |a, (&gj, &yj)| a + gj * yj);
                    let inv = T::one() / norms[i];
                    for j in 0..p {
                        dx[(i, j)] = (gv[(i, j)] - ys[(i, j)] * dot) * inv;
                    }
                }
                sink.add(ix, dx.into_dyn());
            }) as BackFn<T>
        });
        self.graph.push(yv, needs, back, None)
    }

    /// Contrastive negative log-likelihood over a (2N, 2N) similarity
    /// matrix whose rows are laid out as interleaved view pairs: the
    /// positive partner of row i is row i ^ 1.
    ///
    /// Row i contributes −log( exp(S[i,p]/τ) / Σ_{k≠i} exp(S[i,k]/τ) );
    /// the result is the mean over all 2N rows.
    pub fn contrastive_nll(&self, temperature: f64) -> Tensor<T> {
        let s = self.value();
        assert_eq!(s.ndim(), 2, "contrastive_nll expects a square matrix");
        let sv = view2(&s);
        let m = sv.nrows();
        assert_eq!(sv.ncols(), m, "contrastive_nll: matrix must be square");
        assert!(m >= 2 && m % 2 == 0, "contrastive_nll: need an even row count >= 2");
        assert!(temperature > 0.0, "contrastive_nll: temperature must be positive");
        let tau = T::from_f64x(temperature);

        // Masked softmax over each row (diagonal excluded), in the scaled
        // logit space; kept for the backward pass.
        let mut probs = Array2::<T>::zeros((m, m));
        let mut total = T::zero();
        for i in 0..m {
            let mut mx = T::neg_infinity();
            for k in 0..m {
                if k != i {
                    let v = sv[(i, k)] / tau;
                    if v > mx {
                        mx = v;
                    }
                }
            }
            let mut denom = T::zero();
            for k in 0..m {
                if k != i {
                    let e = ((sv[(i, k)] / tau) - mx).exp();
                    probs[(i, k)] = e;
                    denom = denom + e;
                }
            }
            for k in 0..m {
                if k != i {
                    probs[(i, k)] = probs[(i, k)] / denom;
                }
            }
            let lse = denom.ln() + mx;
            let pos = i ^ 1;
            total = total + (lse - sv[(i, pos)] / tau);
        }
        let loss = total / T::from_f64x(m as f64);

        let needs = self.needs_grad();
        let ix = self.idx;
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let gs = *g.iter().next().expect("scalar upstream gradient");
                let scale = gs / (tau * T::from_f64x(m as f64));
                let mut ds = Array2::<T>::zeros((m, m));
                for i in 0..m {
                    let pos = i ^ 1;
                    for k in 0..m {
                        if k == i {
                            continue;
                        }
                        let ind = if k == pos { T::one() } else { T::zero() };
                        ds[(i, k)] = (probs[(i, k)] - ind) * scale;
                    }
                }
                sink.add(ix, ds.into_dyn());
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(scalar_array(loss)), needs, back, None)
    }

    /// Mean binary cross-entropy between predicted probabilities (any
    /// shape) and a same-shaped 0/1 target array.
    ///
    /// Probabilities are clamped to [1e-7, 1 − 1e-7] before the logs so a
    /// saturated sigmoid cannot produce infinities; gradients are zero in
    /// the clamped region.
    pub fn bce_probs(&self, target: &ArrayD<T>) -> Tensor<T> {
        let p = self.value();
        assert_eq!(
            p.shape(),
            target.shape(),
            "bce_probs: prediction/target shape mismatch"
        );
        let n = p.len();
        assert!(n > 0, "bce_probs: empty input");
        let lo = T::from_f64x(1e-7);
        let hi = T::one() - lo;
        let clamp = move |v: T| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        };
        let mut total = T::zero();
        for (&pv, &yv) in p.iter().zip(target.iter()) {
            let pc = clamp(pv);
            total = total - (yv * pc.ln() + (T::one() - yv) * (T::one() - pc).ln());
        }
        let loss = total / T::from_f64x(n as f64);

        let needs = self.needs_grad();
        let ix = self.idx;
        let y = target.clone();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut GradSink<'_, T>| {
                let gs = *g.iter().next().expect("scalar upstream gradient");
                let inv_n = T::one() / T::from_f64x(n as f64);
                let mut dp = ArrayD::<T>::zeros(p.raw_dim());
                for ((dv, &pv), &yv) in dp.iter_mut().zip(p.iter()).zip(y.iter()) {
                    if pv < lo || pv > hi {
                        continue; // flat in the clamped region
                    }
                    let pc = clamp(pv);
                    *dv = gs * inv_n * (pc - yv) / (pc * (T::one() - pc));
                }
                sink.add(ix, dp.into_dyn());
            }) as BackFn<T>
        });
        self.graph
            .push(Rc::new(scalar_array(loss)), needs, back, None)
    }
}
