//! Signal preparation: resampling, detrending, smoothing, band-pass
//! filtering, and fixed-length windowing.
//!
//! The full pipeline is [`preprocess_pipeline`]: resample to the target rate,
//! cut non-overlapping windows, then per window remove the mean, apply a
//! centered moving average, and run a causal Butterworth band-pass realized
//! as cascaded second-order sections. Individual stages are exposed for
//! testing and reuse. All stages operate on `(channels, time)` matrices of
//! `f64` and are pure functions of their inputs.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::signal_io::{EcgRecord, Window};

/// Parameters for the preparation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Output sampling rate in Hz.
    pub target_fs: f64,
    /// Window length in seconds; `window_seconds * target_fs` must be integral.
    pub window_seconds: f64,
    /// Moving-average kernel width; odd and >= 1.
    pub ma_taps: usize,
    /// Butterworth prototype order (the band-pass has twice this many poles).
    pub bp_order: usize,
    /// Lower band edge in Hz.
    pub bp_low: f64,
    /// Upper band edge in Hz.
    pub bp_high: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_fs: 500.0,
            window_seconds: 5.0,
            ma_taps: 5,
            bp_order: 4,
            bp_low: 0.5,
            bp_high: 40.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_fs.is_finite() && self.target_fs > 0.0) {
            return Err(CoreError::validation(format!(
                "target_fs must be positive, got {}",
                self.target_fs
            )));
        }
        if !(self.bp_low > 0.0 && self.bp_low < self.bp_high && self.bp_high < self.target_fs / 2.0)
        {
            return Err(CoreError::validation(format!(
                "band edges must satisfy 0 < low < high < fs/2, got low={} high={} fs={}",
                self.bp_low, self.bp_high, self.target_fs
            )));
        }
        if self.ma_taps == 0 || self.ma_taps % 2 == 0 {
            return Err(CoreError::validation(format!(
                "ma_taps must be odd and >= 1, got {}",
                self.ma_taps
            )));
        }
        if self.bp_order == 0 {
            return Err(CoreError::validation("bp_order must be >= 1".to_string()));
        }
        let n = self.window_seconds * self.target_fs;
        if !(n.is_finite() && n > 0.0 && (n - n.round()).abs() < 1e-9) {
            return Err(CoreError::validation(format!(
                "window_seconds * target_fs must be a positive integer, got {n}"
            )));
        }
        Ok(())
    }

    /// Samples per window at the target rate.
    pub fn window_len(&self) -> usize {
        (self.window_seconds * self.target_fs).round() as usize
    }
}

/// Linearly resample each channel from `fs_in` to `fs_out`.
///
/// The output has `round(T * fs_out / fs_in)` samples on a uniform grid
/// spanning the original duration. Output instants beyond the last input
/// sample hold the final value (endpoint-hold extrapolation).
pub fn resample(signal: &Array2<f64>, fs_in: f64, fs_out: f64) -> Result<Array2<f64>> {
    if !(fs_in.is_finite() && fs_in > 0.0 && fs_out.is_finite() && fs_out > 0.0) {
        return Err(CoreError::validation(format!(
            "sampling rates must be positive, got fs_in={fs_in} fs_out={fs_out}"
        )));
    }
    let (c, t) = signal.dim();
    if t < 2 {
        return Err(CoreError::validation(format!(
            "resample needs at least 2 samples per channel, got {t}"
        )));
    }
    if fs_in == fs_out {
        return Ok(signal.clone());
    }
    let t_out = (t as f64 * fs_out / fs_in).round() as usize;
    let step = fs_in / fs_out;
    let mut out = Array2::zeros((c, t_out));
    for ch in 0..c {
        let row = signal.row(ch);
        for j in 0..t_out {
            let pos = j as f64 * step;
            let i0 = pos.floor() as usize;
            out[(ch, j)] = if i0 + 1 >= t {
                row[t - 1]
            } else {
                let frac = pos - i0 as f64;
                row[i0] * (1.0 - frac) + row[i0 + 1] * frac
            };
        }
    }
    Ok(out)
}

/// Subtract the per-channel mean so each channel averages to zero.
pub fn remove_mean(signal: &Array2<f64>) -> Array2<f64> {
    let mut out = signal.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / row.len() as f64;
        row.mapv_inplace(|v| v - mean);
    }
    out
}

/// Centered uniform moving average with reflected edges.
///
/// Out-of-range indices are mirrored about the end samples without
/// duplicating them (index -1 maps to 1, index T maps to T-2), so a
/// constant signal passes through unchanged.
pub fn moving_average(signal: &Array2<f64>, taps: usize) -> Result<Array2<f64>> {
    let (c, t) = signal.dim();
    if taps == 0 || taps % 2 == 0 || taps > t {
        return Err(CoreError::validation(format!(
            "moving-average taps must be odd, >= 1, and <= signal length; got taps={taps} T={t}"
        )));
    }
    if taps == 1 {
        return Ok(signal.clone());
    }
    let half = (taps / 2) as isize;
    let w = 1.0 / taps as f64;
    let reflect = |j: isize| -> usize {
        if j < 0 {
            (-j) as usize
        } else if j as usize >= t {
            2 * (t - 1) - j as usize
        } else {
            j as usize
        }
    };
    let mut out = Array2::zeros((c, t));
    for ch in 0..c {
        let row = signal.row(ch);
        for i in 0..t as isize {
            let mut acc = 0.0;
            for k in -half..=half {
                acc += row[reflect(i + k)];
            }
            out[(ch, i as usize)] = acc * w;
        }
    }
    Ok(out)
}

/// One biquad in direct-form-II-transposed state space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SosSection {
    /// Numerator taps (b0, b1, b2).
    pub b: [f64; 3],
    /// Denominator taps (a1, a2); a0 is normalized to 1.
    pub a: [f64; 2],
}

impl SosSection {
    /// DC (z = 1) gain of the section.
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Internal state after infinitely long exposure to constant input `x0`,
    /// used to start the causal pass in its step steady state so a constant
    /// input produces no startup ringing.
    fn steady_state(&self, x0: f64) -> (f64, f64) {
        let g = self.dc_gain();
        let s1 = (self.b[1] + self.b[2] - (self.a[0] + self.a[1]) * g) * x0;
        let s2 = (self.b[2] - self.a[1] * g) * x0;
        (s1, s2)
    }

    fn filter_in_place(&self, x: &mut [f64], init: (f64, f64)) {
        let (mut s1, mut s2) = init;
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + s1;
            s1 = b1 * xin + s2 - a1 * y;
            s2 = b2 * xin - a2 * y;
            *v = y;
        }
    }

    fn response_at(&self, z_inv: Complex64) -> Complex64 {
        let z_inv2 = z_inv * z_inv;
        let num = Complex64::new(self.b[0], 0.0) + z_inv * self.b[1] + z_inv2 * self.b[2];
        let den = Complex64::new(1.0, 0.0) + z_inv * self.a[0] + z_inv2 * self.a[1];
        num / den
    }
}

/// A Butterworth band-pass as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPassDesign {
    pub sections: Vec<SosSection>,
    fs: f64,
}

impl BandPassDesign {
    /// Design an order-`order` Butterworth band-pass (2*order poles) with the
    /// given edges, using the bilinear transform with frequency prewarping.
    pub fn new(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Self> {
        if order == 0 {
            return Err(CoreError::validation("filter order must be >= 1".to_string()));
        }
        if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
            return Err(CoreError::validation(format!(
                "band edges must satisfy 0 < low < high < fs/2, got low={low_hz} high={high_hz} fs={fs}"
            )));
        }
        let k = 2.0 * fs; // bilinear constant
        let warp = |f_hz: f64| k * (std::f64::consts::PI * f_hz / fs).tan();
        let wl = warp(low_hz);
        let wh = warp(high_hz);
        let bw = wh - wl;
        let w0_sq = wl * wh;

        // Analog low-pass prototype poles on the unit circle's left half.
        let n = order;
        let mut analog_poles: Vec<Complex64> = Vec::with_capacity(2 * n);
        for i in 1..=n {
            let theta = std::f64::consts::PI * (2 * i + n - 1) as f64 / (2 * n) as f64;
            let p = Complex64::new(theta.cos(), theta.sin());
            // Low-pass -> band-pass: each prototype pole yields the roots of
            // s^2 - (bw * p) s + w0^2 = 0.
            let bp2 = p * bw * 0.5;
            let disc = (bp2 * bp2 - w0_sq).sqrt();
            analog_poles.push(bp2 + disc);
            analog_poles.push(bp2 - disc);
        }

        // Bilinear transform: pole z = (k + s) / (k - s). The analog band-pass
        // has `n` zeros at s = 0 (mapping to z = 1) and gain bw^n; the pole
        // surplus contributes `n` zeros at z = -1 and the gain picks up
        // k^n / prod(k - s_i).
        let mut gain = Complex64::new(bw.powi(n as i32) * k.powi(n as i32), 0.0);
        let mut digital_poles: Vec<Complex64> = Vec::with_capacity(2 * n);
        for &s in &analog_poles {
            gain /= Complex64::new(k, 0.0) - s;
            digital_poles.push((Complex64::new(k, 0.0) + s) / (Complex64::new(k, 0.0) - s));
        }
        if gain.im.abs() > 1e-9 * gain.re.abs() {
            return Err(CoreError::validation(
                "filter design produced a non-real gain; check the band edges".to_string(),
            ));
        }
        let gain = gain.re;
        if gain <= 0.0 {
            return Err(CoreError::validation(
                "filter design produced a non-positive gain".to_string(),
            ));
        }

        // Pair conjugate poles into biquads. Every section takes one zero at
        // z = 1 and one at z = -1 (numerator z^2 - 1), which recombines to the
        // full (z-1)^n (z+1)^n numerator across the cascade.
        let tol = 1e-10;
        let mut complex_ups: Vec<Complex64> = digital_poles
            .iter()
            .copied()
            .filter(|p| p.im > tol)
            .collect();
        let mut reals: Vec<f64> = digital_poles
            .iter()
            .filter(|p| p.im.abs() <= tol)
            .map(|p| p.re)
            .collect();
        complex_ups.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if complex_ups.len() * 2 + reals.len() != 2 * n || reals.len() % 2 != 0 {
            return Err(CoreError::validation(
                "filter design produced an unpairable pole set".to_string(),
            ));
        }

        let per_section_gain = gain.powf(1.0 / n as f64);
        let mut sections = Vec::with_capacity(n);
        for p in complex_ups {
            if p.norm() >= 1.0 {
                return Err(CoreError::validation(format!(
                    "unstable digital pole at |z| = {}",
                    p.norm()
                )));
            }
            sections.push(SosSection {
                b: [per_section_gain, 0.0, -per_section_gain],
                a: [-2.0 * p.re, p.norm_sqr()],
            });
        }
        for pair in reals.chunks(2) {
            let (r1, r2) = (pair[0], pair[1]);
            if r1.abs() >= 1.0 || r2.abs() >= 1.0 {
                return Err(CoreError::validation("unstable real digital pole".to_string()));
            }
            sections.push(SosSection {
                b: [per_section_gain, 0.0, -per_section_gain],
                a: [-(r1 + r2), r1 * r2],
            });
        }
        Ok(Self { sections, fs })
    }

    /// Filter one channel in place with a single causal pass.
    ///
    /// Each section starts in its steady state for a constant input equal to
    /// the channel's first sample (the standard startup-transient
    /// suppression), so a constant channel maps to (numerically) zero output
    /// throughout rather than ringing at the band's low edge.
    pub fn filter_channel(&self, x: &mut [f64]) {
        if x.is_empty() {
            return;
        }
        let mut level = x[0];
        for s in &self.sections {
            s.filter_in_place(x, s.steady_state(level));
            level *= s.dc_gain();
        }
    }

    /// Magnitude of the cascade's frequency response at `freq_hz`.
    pub fn magnitude_at(&self, freq_hz: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI * freq_hz / self.fs;
        let z_inv = Complex64::new(0.0, -omega).exp();
        self.sections
            .iter()
            .map(|s| s.response_at(z_inv).norm())
            .product()
    }
}

/// Apply the configured Butterworth band-pass causally to every channel.
pub fn butterworth_bandpass(
    signal: &Array2<f64>,
    config: &PreprocessConfig,
    fs: f64,
) -> Result<Array2<f64>> {
    let design = BandPassDesign::new(config.bp_order, config.bp_low, config.bp_high, fs)?;
    let mut out = signal.clone();
    for mut row in out.rows_mut() {
        let slice = row.as_slice_mut().expect("row of standard-layout matrix");
        design.filter_channel(slice);
    }
    Ok(out)
}

/// Cut a record into consecutive non-overlapping windows, discarding the
/// trailing remainder. Labels and identity are copied onto every window.
pub fn segment_windows(record: &EcgRecord, config: &PreprocessConfig) -> Result<Vec<Window>> {
    config.validate()?;
    if (record.fs - config.target_fs).abs() > 1e-9 {
        return Err(CoreError::validation(format!(
            "record rate {} does not match target rate {}; resample first",
            record.fs, config.target_fs
        )));
    }
    let wlen = config.window_len();
    let t = record.samples.ncols();
    let n_windows = t / wlen;
    let mut windows = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let start = w * wlen;
        windows.push(Window {
            subject_id: record.subject_id.clone(),
            record_id: record.record_id.clone(),
            window_index: w,
            fs: record.fs,
            leads: record.leads.clone(),
            samples: record
                .samples
                .slice(ndarray::s![.., start..start + wlen])
                .to_owned(),
            labels: record.labels.clone(),
        });
    }
    Ok(windows)
}

/// Full preparation pipeline: resample to the target rate, segment into
/// windows, then per window remove the mean, smooth with the moving
/// average, and band-pass filter.
pub fn preprocess_pipeline(record: &EcgRecord, config: &PreprocessConfig) -> Result<Vec<Window>> {
    config.validate()?;
    record.validate()?;
    let resampled = resample(&record.samples, record.fs, config.target_fs)?;
    let at_target = EcgRecord {
        fs: config.target_fs,
        samples: resampled,
        ..record.clone()
    };
    let mut windows = segment_windows(&at_target, config)?;
    for w in &mut windows {
        let detrended = remove_mean(&w.samples);
        let smoothed = moving_average(&detrended, config.ma_taps)?;
        w.samples = butterworth_bandpass(&smoothed, config, config.target_fs)?;
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        PreprocessConfig::default().validate().unwrap();
        assert_eq!(PreprocessConfig::default().window_len(), 2500);
    }

    #[test]
    fn design_has_expected_section_count() {
        let d = BandPassDesign::new(4, 0.5, 40.0, 500.0).unwrap();
        assert_eq!(d.sections.len(), 4);
        // Mid-band response is essentially unity.
        let mid = d.magnitude_at((0.5f64 * 40.0).sqrt());
        assert!((mid - 1.0).abs() < 0.05, "mid-band gain {mid}");
    }

    #[test]
    fn band_edges_sit_at_half_power() {
        let d = BandPassDesign::new(4, 0.5, 40.0, 500.0).unwrap();
        for edge in [0.5, 40.0] {
            let g = d.magnitude_at(edge);
            let target = 1.0 / 2f64.sqrt();
            assert!(
                (g - target).abs() < 5e-3,
                "edge {edge} Hz gain {g}, want {target}"
            );
        }
    }
}
