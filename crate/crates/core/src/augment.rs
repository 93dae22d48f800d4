//! Stochastic view generation for contrastive training: amplitude scaling,
//! additive noise, crop-and-resize, time masking, segment-wise time warping,
//! lead masking, lead selection, and positive-pair assembly.
//!
//! Every operation is a pure, deterministic function of its inputs and the
//! supplied [`RngStream`], so views are reproducible for a fixed seed. All
//! operations preserve the time length `T`; only [`random_lead_select`]
//! changes the channel count.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::RngStream;

/// Parameter ranges for the augmentation family. All ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Amplitude multiplier range.
    pub scale_range: [f64; 2],
    /// Additive Gaussian noise standard-deviation range.
    pub noise_sigma_range: [f64; 2],
    /// Fraction of the window kept by crop-and-resize.
    pub crop_fraction_range: [f64; 2],
    /// Fraction of the window zeroed by time masking.
    pub mask_ratio_range: [f64; 2],
    /// Number of segments for time warping.
    pub warp_segments_range: [usize; 2],
    /// The two equally likely per-segment warp factors.
    pub warp_factors: [f64; 2],
    /// Number of leads zeroed by lead masking.
    pub rlm_mask_count_range: [usize; 2],
    /// Number of leads kept by lead selection.
    pub rls_keep_count_range: [usize; 2],
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            scale_range: [0.5, 1.7],
            noise_sigma_range: [0.1, 0.25],
            crop_fraction_range: [0.5, 1.0],
            mask_ratio_range: [0.0, 0.5],
            warp_segments_range: [4, 9],
            warp_factors: [2.0, 0.5],
            rlm_mask_count_range: [0, 11],
            rls_keep_count_range: [1, 12],
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: &[f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ordered(&self.scale_range)
            || !ordered(&self.noise_sigma_range)
            || !ordered(&self.crop_fraction_range)
            || !ordered(&self.mask_ratio_range)
        {
            return Err(CoreError::validation(
                "augmentation ranges must be finite with lo <= hi".to_string(),
            ));
        }
        if self.crop_fraction_range[0] <= 0.0 || self.crop_fraction_range[1] > 1.0 {
            return Err(CoreError::validation(
                "crop fractions must lie in (0, 1]".to_string(),
            ));
        }
        if self.mask_ratio_range[0] < 0.0 || self.mask_ratio_range[1] > 1.0 {
            return Err(CoreError::validation(
                "mask ratios must lie in [0, 1]".to_string(),
            ));
        }
        if self.warp_segments_range[0] < 1 || self.warp_segments_range[0] > self.warp_segments_range[1]
        {
            return Err(CoreError::validation(
                "warp segment range must satisfy 1 <= lo <= hi".to_string(),
            ));
        }
        if self.warp_factors.iter().any(|&f| !(f.is_finite() && f > 0.0)) {
            return Err(CoreError::validation(
                "warp factors must be positive".to_string(),
            ));
        }
        if self.rlm_mask_count_range[0] > self.rlm_mask_count_range[1]
            || self.rlm_mask_count_range[1] > 11
        {
            return Err(CoreError::validation(
                "lead-mask count range must satisfy lo <= hi <= 11".to_string(),
            ));
        }
        if self.rls_keep_count_range[0] < 1
            || self.rls_keep_count_range[0] > self.rls_keep_count_range[1]
            || self.rls_keep_count_range[1] > 12
        {
            return Err(CoreError::validation(
                "lead-keep count range must satisfy 1 <= lo <= hi <= 12".to_string(),
            ));
        }
        Ok(())
    }
}

/// How the two views of a positive pair are finished after the base
/// augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// Base augmentation only; views keep all 12 leads.
    Base,
    /// Base augmentation, then a random subset of leads is zeroed in place.
    BaseThenRlm,
    /// Base augmentation, then a random subset of leads is selected; the
    /// subset size is drawn once per batch and shared across the batch.
    BaseThenRls,
}

/// Multiply every sample by `s`.
pub fn amplitude_scale(x: &Array2<f64>, s: f64) -> Array2<f64> {
    x * s
}

/// Add i.i.d. normal(0, sigma^2) noise to every sample.
pub fn gaussian_noise(x: &Array2<f64>, sigma: f64, rng: &mut RngStream) -> Array2<f64> {
    if sigma == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.iter_mut() {
        *v += rng.normal(0.0, sigma);
    }
    out
}

/// Natural cubic spline through uniformly spaced knots `y`, evaluated at
/// position `u` in knot-index coordinates (0 .. y.len()-1).
struct NaturalCubicSpline {
    y: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends.
    m: Vec<f64>,
}

impl NaturalCubicSpline {
    fn fit(y: &[f64]) -> Self {
        let n = y.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm for the tridiagonal system
            // m[i-1] + 4 m[i] + m[i+1] = 6 (y[i-1] - 2 y[i] + y[i+1]).
            let k = n - 2;
            let mut diag = vec![4.0; k];
            let mut rhs: Vec<f64> = (1..n - 1)
                .map(|i| 6.0 * (y[i - 1] - 2.0 * y[i] + y[i + 1]))
                .collect();
            for i in 1..k {
                let w = 1.0 / diag[i - 1];
                diag[i] -= w;
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
            }
        }
        Self { y: y.to_vec(), m }
    }

    fn eval(&self, u: f64) -> f64 {
        let n = self.y.len();
        if n == 1 {
            return self.y[0];
        }
        let i = (u.floor() as usize).min(n - 2);
        let t = u - i as f64;
        let (y0, y1, m0, m1) = (self.y[i], self.y[i + 1], self.m[i], self.m[i + 1]);
        let a = 1.0 - t;
        m0 * a * a * a / 6.0 + m1 * t * t * t / 6.0 + (y0 - m0 / 6.0) * a + (y1 - m1 / 6.0) * t
    }
}

/// Monotone piecewise-cubic Hermite interpolant through uniformly spaced
/// knots, with Fritsch–Carlson slope limiting.
struct Pchip {
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn fit(y: &[f64]) -> Self {
        let n = y.len();
        if n == 1 {
            return Self {
                y: y.to_vec(),
                d: vec![0.0],
            };
        }
        let delta: Vec<f64> = (0..n - 1).map(|i| y[i + 1] - y[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for i in 1..n - 1 {
                let (dl, dr) = (delta[i - 1], delta[i]);
                d[i] = if dl * dr <= 0.0 {
                    0.0
                } else {
                    2.0 * dl * dr / (dl + dr)
                };
            }
            d[0] = Self::edge_slope(delta[0], delta[1]);
            d[n - 1] = Self::edge_slope(delta[n - 2], delta[n - 3]);
        }
        Self { y: y.to_vec(), d }
    }

    /// Three-point one-sided slope estimate with the standard shape limits.
    fn edge_slope(d_near: f64, d_far: f64) -> f64 {
        let mut d0 = (3.0 * d_near - d_far) / 2.0;
        if d0 * d_near <= 0.0 {
            d0 = 0.0;
        } else if d_near * d_far < 0.0 && d0.abs() > 3.0 * d_near.abs() {
            d0 = 3.0 * d_near;
        }
        d0
    }

    fn eval(&self, u: f64) -> f64 {
        let n = self.y.len();
        if n == 1 {
            return self.y[0];
        }
        let i = (u.floor() as usize).min(n - 2);
        let t = u - i as f64;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        self.y[i] * h00 + self.d[i] * h10 + self.y[i + 1] * h01 + self.d[i + 1] * h11
    }
}

/// Evaluate `interp` at `out_len` uniform positions spanning the full knot
/// range `0 ..= in_len-1`.
fn resample_grid(in_len: usize, out_len: usize, mut interp: impl FnMut(f64) -> f64) -> Vec<f64> {
    if out_len == 1 {
        return vec![interp(0.0)];
    }
    let step = (in_len - 1) as f64 / (out_len - 1) as f64;
    (0..out_len).map(|j| interp(j as f64 * step)).collect()
}

/// Keep a random contiguous fraction of the window and stretch it back to
/// the original length with a natural cubic spline per channel.
pub fn crop_resize(
    x: &Array2<f64>,
    fraction: f64,
    spec: &AugmentationSpec,
    rng: &mut RngStream,
) -> Result<Array2<f64>> {
    let [lo, hi] = spec.crop_fraction_range;
    if !(fraction >= lo && fraction <= hi) {
        return Err(CoreError::validation(format!(
            "crop fraction {fraction} outside [{lo}, {hi}]"
        )));
    }
    let (c, t) = x.dim();
    let keep = ((fraction * t as f64).round() as usize).clamp(1, t);
    let start = rng.index(t - keep + 1);
    let mut out = Array2::zeros((c, t));
    for ch in 0..c {
        let seg: Vec<f64> = x.row(ch).iter().skip(start).take(keep).cloned().collect();
        let spline = NaturalCubicSpline::fit(&seg);
        let resized = resample_grid(keep, t, |u| spline.eval(u));
        for (i, v) in resized.into_iter().enumerate() {
            out[(ch, i)] = v;
        }
    }
    Ok(out)
}

/// Zero one contiguous span of `round(ratio * T)` samples, the same span in
/// every channel.
pub fn time_mask(
    x: &Array2<f64>,
    ratio: f64,
    spec: &AugmentationSpec,
    rng: &mut RngStream,
) -> Result<Array2<f64>> {
    let [lo, hi] = spec.mask_ratio_range;
    if !(ratio >= lo && ratio <= hi) {
        return Err(CoreError::validation(format!(
            "mask ratio {ratio} outside [{lo}, {hi}]"
        )));
    }
    let t = x.ncols();
    let len = (ratio * t as f64).round() as usize;
    let mut out = x.clone();
    if len == 0 {
        return Ok(out);
    }
    let start = rng.index(t - len + 1);
    out.slice_mut(ndarray::s![.., start..start + len]).fill(0.0);
    Ok(out)
}

/// Cut the window into 4–9 segments, stretch or squeeze each by the two
/// configured factors with equal probability, concatenate, and restore the
/// original length with monotone piecewise-cubic interpolation.
///
/// The segment boundaries and per-segment factors are drawn once and applied
/// identically to every channel, so the warp is a consistent distortion of
/// the shared time axis.
pub fn time_warp(x: &Array2<f64>, spec: &AugmentationSpec, rng: &mut RngStream) -> Result<Array2<f64>> {
    let (c, t) = x.dim();
    let [seg_lo, seg_hi] = spec.warp_segments_range;
    let n_seg = rng.int_inclusive(seg_lo as u64, seg_hi as u64) as usize;
    if t < n_seg || t < 2 {
        return Err(CoreError::validation(format!(
            "time_warp needs at least {n_seg} samples, got {t}"
        )));
    }
    let factors: Vec<f64> = (0..n_seg)
        .map(|_| spec.warp_factors[rng.index(spec.warp_factors.len())])
        .collect();
    // Segment s covers [floor(s*T/n), floor((s+1)*T/n)).
    let bounds: Vec<usize> = (0..=n_seg).map(|s| s * t / n_seg).collect();

    let mut out = Array2::zeros((c, t));
    let mut warped: Vec<f64> = Vec::with_capacity(2 * t);
    for ch in 0..c {
        warped.clear();
        for s in 0..n_seg {
            let seg: Vec<f64> = x
                .row(ch)
                .iter()
                .skip(bounds[s])
                .take(bounds[s + 1] - bounds[s])
                .cloned()
                .collect();
            let target = ((seg.len() as f64 * factors[s]).round() as usize).max(1);
            // Linear per-segment resampling; the shape-preserving pass below
            // handles the final length restoration.
            if seg.len() == 1 {
                warped.extend(std::iter::repeat(seg[0]).take(target));
            } else {
                warped.extend(resample_grid(seg.len(), target, |u| {
                    let i = (u.floor() as usize).min(seg.len() - 2);
                    let frac = u - i as f64;
                    seg[i] * (1.0 - frac) + seg[i + 1] * frac
                }));
            }
        }
        let pchip = Pchip::fit(&warped);
        for (i, v) in resample_grid(warped.len(), t, |u| pchip.eval(u))
            .into_iter()
            .enumerate()
        {
            out[(ch, i)] = v;
        }
    }
    Ok(out)
}

/// Amplitude-scale the window, then apply exactly one of the four secondary
/// augmentations (noise, crop-resize, time mask, time warp) chosen uniformly.
///
/// Draw order is part of the contract: first the scale factor, then the
/// four-way choice (0 = noise, 1 = crop, 2 = mask, 3 = warp), then the
/// chosen augmentation's own parameters.
pub fn base_augment(x: &Array2<f64>, spec: &AugmentationSpec, rng: &mut RngStream) -> Result<Array2<f64>> {
    let s = rng.uniform(spec.scale_range[0], spec.scale_range[1]);
    let scaled = amplitude_scale(x, s);
    match rng.index(4) {
        0 => {
            let sigma = rng.uniform(spec.noise_sigma_range[0], spec.noise_sigma_range[1]);
            Ok(gaussian_noise(&scaled, sigma, rng))
        }
        1 => {
            let fraction = rng.uniform(spec.crop_fraction_range[0], spec.crop_fraction_range[1]);
            crop_resize(&scaled, fraction, spec, rng)
        }
        2 => {
            let ratio = rng.uniform(spec.mask_ratio_range[0], spec.mask_ratio_range[1]);
            time_mask(&scaled, ratio, spec, rng)
        }
        _ => time_warp(&scaled, spec, rng),
    }
}

/// Zero a uniformly drawn number (0–11) of uniformly chosen rows of a
/// 12-lead window.
pub fn random_lead_mask(x: &Array2<f64>, spec: &AugmentationSpec, rng: &mut RngStream) -> Result<Array2<f64>> {
    if x.nrows() != 12 {
        return Err(CoreError::validation(format!(
            "lead masking requires 12 channels, got {}",
            x.nrows()
        )));
    }
    let [lo, hi] = spec.rlm_mask_count_range;
    let m = rng.int_inclusive(lo as u64, hi as u64) as usize;
    let mut out = x.clone();
    for row in rng.subset(12, m) {
        out.row_mut(row).fill(0.0);
    }
    Ok(out)
}

/// Draw the per-batch lead-keep count for the selection strategy.
pub fn draw_rls_keep_count(spec: &AugmentationSpec, rng: &mut RngStream) -> usize {
    let [lo, hi] = spec.rls_keep_count_range;
    rng.int_inclusive(lo as u64, hi as u64) as usize
}

/// Keep `keep_count` uniformly chosen rows of a 12-lead window, in their
/// original relative order, with values untouched. When `keep_count` is
/// `None` it is drawn uniformly from the configured range.
pub fn random_lead_select(
    x: &Array2<f64>,
    keep_count: Option<usize>,
    spec: &AugmentationSpec,
    rng: &mut RngStream,
) -> Result<Array2<f64>> {
    if x.nrows() != 12 {
        return Err(CoreError::validation(format!(
            "lead selection requires 12 channels, got {}",
            x.nrows()
        )));
    }
    let [lo, hi] = spec.rls_keep_count_range;
    let keep = match keep_count {
        Some(k) => {
            if k < lo || k > hi {
                return Err(CoreError::validation(format!(
                    "keep_count {k} outside [{lo}, {hi}]"
                )));
            }
            k
        }
        None => draw_rls_keep_count(spec, rng),
    };
    let rows = rng.subset(12, keep);
    let mut out = Array2::zeros((keep, x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    Ok(out)
}

/// Build the two augmented views of one window.
///
/// Both views run the base augmentation with independent draws from `rng`
/// (view 1 consumes first), then the strategy's lead step. Under the
/// selection strategy the keep count must have been drawn once for the whole
/// batch (see [`draw_rls_keep_count`]) and is shared by both views, while
/// the concrete lead subsets are drawn per view.
pub fn make_positive_pair(
    x: &Array2<f64>,
    strategy: PairStrategy,
    batch_keep_count: Option<usize>,
    spec: &AugmentationSpec,
    rng: &mut RngStream,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x.nrows() != 12 {
        return Err(CoreError::validation(format!(
            "positive pairs are built from 12-lead windows, got {} channels",
            x.nrows()
        )));
    }
    let finish = |base: Array2<f64>, rng: &mut RngStream| -> Result<Array2<f64>> {
        match strategy {
            PairStrategy::Base => Ok(base),
            PairStrategy::BaseThenRlm => random_lead_mask(&base, spec, rng),
            PairStrategy::BaseThenRls => {
                let keep = batch_keep_count.ok_or_else(|| {
                    CoreError::validation(
                        "the selection strategy needs the batch-level keep count".to_string(),
                    )
                })?;
                random_lead_select(&base, Some(keep), spec, rng)
            }
        }
    };
    let v1 = finish(base_augment(x, spec, rng)?, rng)?;
    let v2 = finish(base_augment(x, spec, rng)?, rng)?;
    Ok((v1, v2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::purpose;

    fn rng() -> RngStream {
        RngStream::from_seed(2024).child(purpose::AUGMENT, &[0])
    }

    #[test]
    fn default_spec_is_valid() {
        AugmentationSpec::default().validate().unwrap();
    }

    #[test]
    fn spline_interpolates_knots_exactly() {
        let y = [1.0, -2.0, 0.5, 3.0, 3.0, -1.0];
        let s = NaturalCubicSpline::fit(&y);
        for (i, &v) in y.iter().enumerate() {
            assert!((s.eval(i as f64) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_matches_independent_reference_values() {
        // Evaluations of a natural cubic spline through the same knots,
        // computed with an independent interpolation library.
        let y = [1.0, -2.0, 0.5, 3.0, 3.0, -1.0, 0.25, 2.5];
        let golden = [
            (0.4, -6.882445894881484e-01),
            (1.5, -1.177752490553075e+00),
            (2.25, 1.275181960666438e+00),
            (3.9, 3.255104087942288e+00),
            (5.5, -9.468073686018550e-01),
            (6.8, 2.083588457574716e+00),
        ];
        let s = NaturalCubicSpline::fit(&y);
        for (u, expect) in golden {
            let got = s.eval(u);
            assert!((got - expect).abs() < 1e-12, "spline({u}) = {got}, want {expect}");
        }
    }

    #[test]
    fn pchip_matches_independent_reference_values() {
        let y = [1.0, -2.0, 0.5, 3.0, 3.0, -1.0, 0.25, 2.5];
        let golden = [
            (0.4, -8.840000000000001e-01),
            (1.5, -1.062500000000000e+00),
            (2.25, 1.242187500000000e+00),
            (3.9, 3.000000000000000e+00),
            (5.5, -5.758928571428572e-01),
            (6.8, 1.965428571428571e+00),
        ];
        let p = Pchip::fit(&y);
        for (u, expect) in golden {
            let got = p.eval(u);
            assert!((got - expect).abs() < 1e-12, "pchip({u}) = {got}, want {expect}");
        }
    }

    #[test]
    fn pchip_interpolates_knots_and_preserves_monotone_runs() {
        let y = [0.0, 1.0, 4.0, 4.5, 9.0];
        let p = Pchip::fit(&y);
        for (i, &v) in y.iter().enumerate() {
            assert!((p.eval(i as f64) - v).abs() < 1e-12);
        }
        let mut prev = f64::MIN;
        for j in 0..=400 {
            let v = p.eval(4.0 * j as f64 / 400.0);
            assert!(v >= prev - 1e-12, "not monotone at step {j}");
            prev = v;
        }
    }

    #[test]
    fn positive_pair_shapes_per_strategy() {
        let spec = AugmentationSpec::default();
        let x = Array2::from_shape_fn((12, 64), |(c, t)| (c + t) as f64 * 0.01);
        let mut r = rng();
        let (a, b) = make_positive_pair(&x, PairStrategy::Base, None, &spec, &mut r).unwrap();
        assert_eq!(a.dim(), (12, 64));
        assert_eq!(b.dim(), (12, 64));
        let (a, b) = make_positive_pair(&x, PairStrategy::BaseThenRlm, None, &spec, &mut r).unwrap();
        assert_eq!(a.dim(), (12, 64));
        assert_eq!(b.dim(), (12, 64));
        let (a, b) =
            make_positive_pair(&x, PairStrategy::BaseThenRls, Some(3), &spec, &mut r).unwrap();
        assert_eq!(a.dim(), (3, 64));
        assert_eq!(b.dim(), (3, 64));
        assert!(make_positive_pair(&x, PairStrategy::BaseThenRls, None, &spec, &mut r).is_err());
    }
}
