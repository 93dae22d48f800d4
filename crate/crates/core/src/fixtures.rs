//! Golden-fixture registry. Every numerically delicate behavior in this
//! crate is pinned by a fixture: frozen input files, frozen expected values,
//! a tolerance, and the name of a standalone Python oracle script that
//! reproduces the expected values without touching this crate.
//! [`verify_fixtures`] replays each fixture through the main implementation
//! and reports per-fixture pass/fail; the oracle scripts provide the second,
//! independent route (see `fixtures/oracles/`), so a regression in either
//! route shows up as disagreement.
//!
//! Layout of a fixtures directory:
//!
//! ```text
//! fixtures/
//!   manifest.json     one GoldenFixture entry per pinned behavior
//!   data/             frozen inputs and audited artifacts (JSON, CSV, ECGW)
//!   oracles/          stdlib-only Python scripts, one per fixture family
//! ```
//!
//! Origin tags: `closed-form` (expected value has an analytic derivation),
//! `hand-computed` (worked by hand), `audited-run` (output of a seeded run
//! that was checked against its statistical or qualitative target once and
//! frozen for regression), `byte-layout` (golden binary file).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::augment::{crop_resize, gaussian_noise, time_warp, AugmentationSpec, PairStrategy};
use crate::error::{CoreError, Result};
use crate::finetune::{balanced_batch, train_supervised, BalancedIndex, FinetuneConfig, InputMode};
use crate::metrics::{aggregate_report, cinc_score, WeightMatrix};
use crate::model::{
    backbone_forward, count_parameters, gradient_check, init_params, CheckLoss, ModelConfig,
};
use crate::preprocess::{
    preprocess_pipeline, remove_mean, resample, BandPassDesign, PreprocessConfig,
};
use crate::profiler::analytic_activation_bytes;
use crate::rng::{purpose, RngStream};
use crate::signal_io::{
    read_record, synth_dataset, write_record, ClassEffect, ClassSpec, EcgRecord, LeadId,
    SynthConfig, Window, WindowBank, WindowDataset, WindowMeta,
};
use crate::ssl_pretrain::{
    nt_xent_loss, pretrain, sample_pretrain_batch, PretrainConfig,
};
use crate::tensor::Graph;

// ------------------------------------------------------------------- types

/// One pinned behavior: what to recompute, the frozen inputs it reads, the
/// frozen values it must reproduce, and the independent oracle for them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenFixture {
    /// Unique fixture id (snake_case).
    pub id: String,
    /// Dispatch key naming the operation under test.
    pub operation: String,
    /// Frozen input files, relative to the fixtures directory.
    pub inputs: Vec<String>,
    /// Operation parameters (everything needed to recompute).
    pub params: Value,
    /// Frozen expected values, keyed the same way [`recompute_fixture`]
    /// keys its result.
    pub expected: Value,
    /// Absolute tolerance for floating-point comparisons; integers,
    /// booleans, and strings must match exactly.
    pub tolerance: f64,
    /// How the expected values were obtained (see module docs).
    pub origin: String,
    /// Oracle script, relative to the fixtures directory.
    pub oracle: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub fixtures: Vec<GoldenFixture>,
}

impl FixtureManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let m: FixtureManifest = serde_json::from_str(&text)?;
        let mut seen = std::collections::BTreeSet::new();
        for f in &m.fixtures {
            if !seen.insert(f.id.as_str()) {
                return Err(CoreError::validation(format!(
                    "duplicate fixture id {:?}",
                    f.id
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| CoreError::io(path, e))
    }
}

/// Outcome of replaying one fixture through the main implementation.
#[derive(Debug, Clone)]
pub struct FixtureReport {
    pub id: String,
    pub passed: bool,
    /// Empty when passed; otherwise one line per mismatch or violated
    /// property.
    pub details: Vec<String>,
    pub elapsed_s: f64,
}

// ------------------------------------------------------------ verification

/// Replay every fixture in `dir/manifest.json` through the main
/// implementation and compare against the frozen expected values. Missing
/// manifest or missing input files are hard errors; value mismatches and
/// violated properties are reported per fixture.
pub fn verify_fixtures(dir: &Path) -> Result<Vec<FixtureReport>> {
    let manifest = FixtureManifest::load(&dir.join("manifest.json"))?;
    let mut reports = Vec::with_capacity(manifest.fixtures.len());
    for fixture in &manifest.fixtures {
        for input in &fixture.inputs {
            let path = dir.join(input);
            if !path.exists() {
                return Err(CoreError::validation(format!(
                    "fixture {:?}: missing input file {}",
                    fixture.id,
                    path.display()
                )));
            }
        }
        let start = Instant::now();
        let mut details = Vec::new();
        match recompute_fixture(fixture, dir) {
            Ok((got, mut violations)) => {
                details.append(&mut violations);
                compare_values("", &fixture.expected, &got, fixture.tolerance, &mut details);
            }
            Err(e) => details.push(format!("recompute failed: {e}")),
        }
        reports.push(FixtureReport {
            id: fixture.id.clone(),
            passed: details.is_empty(),
            details,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(reports)
}

/// Recursive comparison of expected vs recomputed JSON values. Numbers that
/// are integers on both sides must match exactly; other numbers must agree
/// within `tol`; strings and booleans must match exactly. Object comparison
/// walks the keys of `expected` (extra recomputed keys are allowed).
pub fn compare_values(path: &str, expected: &Value, got: &Value, tol: f64, out: &mut Vec<String>) {
    match (expected, got) {
        (Value::Object(em), Value::Object(gm)) => {
            for (k, ev) in em {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match gm.get(k) {
                    Some(gv) => compare_values(&sub, ev, gv, tol, out),
                    None => out.push(format!("{sub}: missing from recomputed values")),
                }
            }
        }
        (Value::Array(ea), Value::Array(ga)) => {
            if ea.len() != ga.len() {
                out.push(format!("{path}: length {} vs {}", ea.len(), ga.len()));
                return;
            }
            for (i, (ev, gv)) in ea.iter().zip(ga.iter()).enumerate() {
                compare_values(&format!("{path}[{i}]"), ev, gv, tol, out);
            }
        }
        (Value::Number(en), Value::Number(gn)) => {
            if let (Some(ei), Some(gi)) = (en.as_i64(), gn.as_i64()) {
                if ei != gi {
                    out.push(format!("{path}: expected {ei}, got {gi}"));
                }
                return;
            }
            let (e, g) = (en.as_f64().unwrap_or(f64::NAN), gn.as_f64().unwrap_or(f64::NAN));
            if !((e - g).abs() <= tol) {
                out.push(format!("{path}: expected {e}, got {g} (tol {tol})"));
            }
        }
        _ => {
            if expected != got {
                out.push(format!("{path}: expected {expected}, got {got}"));
            }
        }
    }
}

// ------------------------------------------------------------ JSON helpers

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn p_f64(params: &Value, key: &str) -> Result<f64> {
    params
        .get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| CoreError::validation(format!("fixture params missing number {key:?}")))
}

fn p_usize(params: &Value, key: &str) -> Result<usize> {
    params
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| CoreError::validation(format!("fixture params missing integer {key:?}")))
}

fn p_str<'a>(params: &'a Value, key: &str) -> Result<&'a str> {
    params
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| CoreError::validation(format!("fixture params missing string {key:?}")))
}

fn vec_f64(value: &Value, what: &str) -> Result<Vec<f64>> {
    let items = value
        .as_array()
        .ok_or_else(|| CoreError::validation(format!("{what}: expected a number array")))?;
    items
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| CoreError::validation(format!("{what}: non-numeric entry {v}")))
        })
        .collect()
}

fn mat_f64(value: &Value, what: &str) -> Result<Vec<Vec<f64>>> {
    value
        .as_array()
        .map(|rows| {
            rows.iter()
                .map(|r| vec_f64(r, what))
                .collect::<Result<Vec<Vec<f64>>>>()
        })
        .transpose()?
        .ok_or_else(|| CoreError::validation(format!("{what}: expected a nested number array")))
}

fn array2_from_value(value: &Value, what: &str) -> Result<Array2<f64>> {
    let rows = mat_f64(value, what)?;
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(CoreError::validation(format!("{what}: ragged rows")));
    }
    Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect())
        .map_err(|e| CoreError::validation(format!("{what}: {e}")))
}

fn array2_to_value(a: &Array2<f64>) -> Value {
    Value::Array(
        a.rows()
            .into_iter()
            .map(|row| Value::Array(row.iter().map(|&v| json!(v)).collect()))
            .collect(),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ------------------------------------------------------------ signal helpers

/// Mean spacing between prominent peaks: local maxima above half the global
/// maximum, separated by a 0.25 s refractory gap.
pub fn mean_peak_interval(x: &[f64], fs: f64) -> Option<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thr = 0.5 * max;
    let min_gap = (0.25 * fs).round() as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..x.len().saturating_sub(1) {
        if x[i] >= thr && x[i] >= x[i - 1] && x[i] > x[i + 1] {
            if peaks.last().is_none_or(|&p| i - p >= min_gap) {
                peaks.push(i);
            }
        }
    }
    if peaks.len() < 2 {
        return None;
    }
    let span = (peaks[peaks.len() - 1] - peaks[0]) as f64;
    Some(span / ((peaks.len() - 1) as f64 * fs))
}

fn sine_record(fs: f64, freq_hz: f64, duration_s: f64) -> EcgRecord {
    let t = (duration_s * fs).round() as usize;
    EcgRecord {
        subject_id: "fixture".to_string(),
        record_id: "sine".to_string(),
        fs,
        leads: vec![LeadId::I],
        samples: Array2::from_shape_fn((1, t), |(_, i)| {
            (std::f64::consts::TAU * freq_hz * i as f64 / fs).sin()
        }),
        labels: vec![],
    }
}

/// Steady-state gain of the causal band-pass at `freq`, measured by
/// quadrature demodulation of a filtered unit sine after a long transient.
fn measured_sine_gain(design: &BandPassDesign, freq: f64, fs: f64) -> f64 {
    let period = fs / freq;
    let skip = 4000usize;
    let n_periods = (2000.0 / period).ceil().max(2.0) as usize;
    let measure = (n_periods as f64 * period).round() as usize;
    let total = skip + measure;
    let mut x: Vec<f64> = (0..total)
        .map(|i| (std::f64::consts::TAU * freq * i as f64 / fs).sin())
        .collect();
    design.filter_channel(&mut x);
    let (mut c, mut s) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate().skip(skip) {
        let w = std::f64::consts::TAU * freq * i as f64 / fs;
        c += v * w.cos();
        s += v * w.sin();
    }
    2.0 * (c * c + s * s).sqrt() / measure as f64
}

/// Sine-family multi-lead windows for seeded training runs.
fn tone_dataset(n: usize, t: usize, seed: u64) -> Result<WindowDataset> {
    let mut rng = RngStream::from_seed(seed).child(purpose::SYNTH, &[9]);
    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        let hz = rng.uniform(1.0, 8.0);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let mut samples = Array2::<f64>::zeros((12, t));
        for (c, mut row) in samples.rows_mut().into_iter().enumerate() {
            let gain = 0.5 + 0.07 * c as f64;
            for (j, v) in row.iter_mut().enumerate() {
                let x = j as f64 / t as f64;
                *v = gain * (std::f64::consts::TAU * hz * x + phase).sin()
                    + 0.05 * rng.normal(0.0, 1.0);
            }
        }
        windows.push(Window {
            subject_id: format!("s{:03}", i / 4),
            record_id: format!("r{i:04}"),
            window_index: i % 4,
            fs: 64.0,
            leads: LeadId::ALL.to_vec(),
            samples,
            labels: vec!["NORM".to_string()],
        });
    }
    WindowDataset::from_windows(windows)
}

/// Two-class dataset (sine vs square @ matched frequency) that a small
/// supervised run separates quickly.
fn two_tone_dataset(n_per_class: usize, t: usize, seed: u64) -> Result<WindowDataset> {
    let mut rng = RngStream::from_seed(seed).child(purpose::SYNTH, &[1]);
    let fs = 64.0;
    let mut windows = Vec::new();
    for i in 0..n_per_class * 2 {
        let class = if i % 2 == 0 { "rhythm_sine" } else { "rhythm_square" };
        let freq = 3.0 + (i % 3) as f64;
        let samples = Array2::from_shape_fn((12, t), |(c, s)| {
            let phase = std::f64::consts::TAU * freq * s as f64 / fs;
            let base = if i % 2 == 0 { phase.sin() } else { phase.sin().signum() };
            (1.0 + 0.05 * c as f64) * base + 0.02 * rng.normal(0.0, 1.0)
        });
        windows.push(Window {
            subject_id: format!("s{i:03}"),
            record_id: format!("r{i:03}"),
            window_index: 0,
            fs,
            leads: LeadId::ALL.to_vec(),
            samples,
            labels: vec![class.to_string()],
        });
    }
    WindowDataset::from_windows(windows)
}

fn read_curve_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let body = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if i == 0 {
            continue; // header
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CoreError::validation(format!("{}: line {i}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok(rows)
}

fn compare_curves(frozen: &[Vec<f64>], fresh: &[Vec<f64>], tol: f64, out: &mut Vec<String>) {
    if frozen.len() != fresh.len() {
        out.push(format!("curve rows: {} frozen vs {} fresh", frozen.len(), fresh.len()));
        return;
    }
    for (i, (a, b)) in frozen.iter().zip(fresh.iter()).enumerate() {
        if a.len() != b.len() {
            out.push(format!("curve row {i}: {} vs {} columns", a.len(), b.len()));
            return;
        }
        for (j, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            if !((x - y).abs() <= tol) {
                out.push(format!("curve[{i}][{j}]: frozen {x} vs fresh {y}"));
            }
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// --------------------------------------------------------------- recompute

/// Recompute one fixture's values through the main implementation. Returns
/// the keyed values plus any violated-property messages (empty when all
/// in-arm properties hold). Public so the generator example can freeze the
/// values this function produces.
pub fn recompute_fixture(fixture: &GoldenFixture, dir: &Path) -> Result<(Value, Vec<String>)> {
    let p = &fixture.params;
    let mut bad: Vec<String> = Vec::new();
    let value = match fixture.operation.as_str() {
        // ---------------------------------------------------- synthesis
        "synth_beat_rate" => {
            let factor = p_f64(p, "factor")?;
            let config = SynthConfig {
                n_subjects: p_usize(p, "n_subjects")?,
                records_per_subject: p_usize(p, "records_per_subject")?,
                fs: p_f64(p, "fs")?,
                duration_s: p_f64(p, "duration_s")?,
                normal_class: "NORMAL".to_string(),
                abnormal_classes: vec![ClassSpec {
                    code: "TACHY".to_string(),
                    effect: ClassEffect::BeatRate { factor },
                }],
                abnormal_prob: p_f64(p, "abnormal_prob")?,
                noise_mv: p_f64(p, "noise_mv")?,
            };
            let tmp = tempfile::tempdir().map_err(|e| CoreError::io(dir, e))?;
            let manifest = synth_dataset(&config, p_usize(p, "seed")? as u64, tmp.path())?;
            let find = |id: &str| -> Result<EcgRecord> {
                let entry = manifest
                    .records
                    .iter()
                    .find(|e| e.record_id == id)
                    .ok_or_else(|| {
                        CoreError::validation(format!("record {id:?} not in synthesized set"))
                    })?;
                manifest.load_record(entry, tmp.path())
            };
            let normal = find(p_str(p, "normal_record")?)?;
            let tachy = find(p_str(p, "tachy_record")?)?;
            if !normal.labels.iter().all(|l| l == "NORMAL") {
                bad.push(format!("baseline record labels {:?}", normal.labels));
            }
            if !tachy.labels.iter().any(|l| l == "TACHY") {
                bad.push(format!("fast record labels {:?}", tachy.labels));
            }
            // The frozen lead-I traces must be reproduced bit-for-bit.
            for (input, rec, name) in [
                (&fixture.inputs[0], &normal, "baseline"),
                (&fixture.inputs[1], &tachy, "fast"),
            ] {
                let frozen = vec_f64(&read_json(&dir.join(input))?, input)?;
                let fresh: Vec<f64> = rec.samples.row(0).to_vec();
                let d = max_abs_diff(&frozen, &fresh);
                if !(d <= 1e-12) {
                    bad.push(format!("{name} lead-I trace drifted by {d}"));
                }
            }
            let fs = config.fs;
            let base = mean_peak_interval(&normal.samples.row(0).to_vec(), fs)
                .ok_or_else(|| CoreError::validation("too few peaks in baseline record"))?;
            let fast = mean_peak_interval(&tachy.samples.row(0).to_vec(), fs)
                .ok_or_else(|| CoreError::validation("too few peaks in fast record"))?;
            let ratio = fast / base;
            if !((ratio - 1.0 / factor).abs() <= 0.05) {
                bad.push(format!(
                    "interval ratio {ratio} not within 0.05 of {}",
                    1.0 / factor
                ));
            }
            json!({
                "normal_interval_s": base,
                "tachy_interval_s": fast,
                "interval_ratio": ratio,
            })
        }

        // ------------------------------------------------- preprocessing
        "resample_linear_ramp" => {
            let input = array2_from_value(
                p.get("input")
                    .ok_or_else(|| CoreError::validation("missing params.input"))?,
                "input",
            )?;
            let out = resample(&input, p_f64(p, "fs_in")?, p_f64(p, "fs_out")?)?;
            json!({ "output": array2_to_value(&out) })
        }

        "remove_mean" => {
            let input = array2_from_value(&read_json(&dir.join(&fixture.inputs[0]))?, "input")?;
            let out = remove_mean(&input);
            let max_mean = out
                .rows()
                .into_iter()
                .map(|r| r.mean().unwrap_or(0.0).abs())
                .fold(0.0, f64::max);
            if !(max_mean <= 1e-9) {
                bad.push(format!("largest per-channel residual mean {max_mean} > 1e-9"));
            }
            json!({ "output": array2_to_value(&out), "max_abs_row_mean": max_mean })
        }

        "bandpass_gain" => {
            let (order, low, high, fs) = (
                p_usize(p, "order")?,
                p_f64(p, "low_hz")?,
                p_f64(p, "high_hz")?,
                p_f64(p, "fs")?,
            );
            let freq = p_f64(p, "freq_hz")?;
            let design = BandPassDesign::new(order, low, high, fs)?;
            let magnitude = design.magnitude_at(freq);
            let measured = measured_sine_gain(&design, freq, fs);
            let db_error = (20.0 * (measured / magnitude).log10()).abs();
            if let Some(max_db) = p.get("max_db_error").and_then(Value::as_f64) {
                if !(db_error <= max_db) {
                    bad.push(format!("measured gain off analytic by {db_error} dB > {max_db}"));
                }
            }
            if let Some(min_gain) = p.get("min_gain").and_then(Value::as_f64) {
                if !(measured >= min_gain) {
                    bad.push(format!("measured gain {measured} < floor {min_gain}"));
                }
            }
            json!({ "magnitude": magnitude, "measured_gain": measured, "db_error": db_error })
        }

        "pipeline_sine" => {
            let fs = p_f64(p, "fs")?;
            let freq = p_f64(p, "freq_hz")?;
            let rec = sine_record(fs, freq, p_f64(p, "duration_s")?);
            let windows = preprocess_pipeline(&rec, &PreprocessConfig::default())?;
            let wi = p_usize(p, "window_index")?;
            let row = p_usize(p, "lead_row")?;
            let window = windows
                .get(wi)
                .ok_or_else(|| CoreError::validation(format!("window {wi} out of range")))?;
            let out_full: Vec<f64> = window.samples.row(row).to_vec();
            let frozen = vec_f64(&read_json(&dir.join(&fixture.inputs[0]))?, "window")?;
            let drift = max_abs_diff(&frozen, &out_full);
            if !(drift <= 1e-9) {
                bad.push(format!("processed window drifted from frozen copy by {drift}"));
            }
            // Amplitude and shape versus the raw sine, skipping the filter
            // transient; the causal filter delays the sine slightly, so
            // shape is judged at the best alignment lag.
            let skip = 500usize;
            let win_len = window.samples.ncols();
            let out: Vec<f64> = out_full[skip..].to_vec();
            let raw: Vec<f64> = rec.samples.row(0).to_vec()[wi * win_len + skip..(wi + 1) * win_len].to_vec();
            let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
            let rms_ratio = rms(&out) / rms(&raw);
            let n = out.len() - 20;
            let mut best_corr = f64::MIN;
            for lag in 0..20usize {
                let (mut dot, mut no, mut nr) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    dot += out[i + lag] * raw[i];
                    no += out[i + lag] * out[i + lag];
                    nr += raw[i] * raw[i];
                }
                best_corr = best_corr.max(dot / (no * nr).sqrt());
            }
            if !((rms_ratio - 1.0).abs() <= 0.10) {
                bad.push(format!("RMS ratio {rms_ratio} outside 1 ± 0.10"));
            }
            if !(best_corr >= 0.99) {
                bad.push(format!("best-lag correlation {best_corr} < 0.99"));
            }
            json!({ "rms_ratio": rms_ratio, "best_corr": best_corr })
        }

        // --------------------------------------------------- augmentation
        "noise_std" => {
            let t = p_usize(p, "t")?;
            let sigma = p_f64(p, "sigma")?;
            let mut rng =
                RngStream::from_seed(p_usize(p, "seed")? as u64).child(purpose::AUGMENT, &[0]);
            let x = Array2::<f64>::zeros((1, t));
            let noisy = gaussian_noise(&x, sigma, &mut rng);
            let n = noisy.len() as f64;
            let mean = noisy.iter().sum::<f64>() / n;
            let var = noisy.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let std = var.sqrt();
            let (lo, hi) = (p_f64(p, "lo")?, p_f64(p, "hi")?);
            if !(std >= lo && std <= hi) {
                bad.push(format!("sample std {std} outside [{lo}, {hi}]"));
            }
            json!({ "sample_std": std })
        }

        "crop_resize_ramp" => {
            let t = p_usize(p, "t")?;
            let fraction = p_f64(p, "fraction")?;
            let mut rng =
                RngStream::from_seed(p_usize(p, "seed")? as u64).child(purpose::AUGMENT, &[1]);
            let ramp = Array2::from_shape_fn((1, t), |(_, i)| i as f64);
            let out = crop_resize(&ramp, fraction, &AugmentationSpec::default(), &mut rng)?;
            let row: Vec<f64> = out.row(0).to_vec();
            // Cubic splines reproduce affine data exactly, so the resized
            // crop must still be a straight line: zero second differences.
            let max_dd = row
                .windows(3)
                .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
                .fold(0.0, f64::max);
            if !(max_dd <= 1e-7) {
                bad.push(format!("resized ramp bends: max second difference {max_dd}"));
            }
            json!({ "output": Value::Array(row.iter().map(|&v| json!(v)).collect()),
                    "max_second_diff": max_dd })
        }

        "time_warp_ramp" => {
            let t = p_usize(p, "t")?;
            let mut rng =
                RngStream::from_seed(p_usize(p, "seed")? as u64).child(purpose::AUGMENT, &[2]);
            let ramp = Array2::from_shape_fn((1, t), |(_, i)| i as f64);
            let out = time_warp(&ramp, &AugmentationSpec::default(), &mut rng)?;
            let row: Vec<f64> = out.row(0).to_vec();
            let monotone = row.windows(2).all(|w| w[1] >= w[0] - 1e-9);
            if row.len() != t {
                bad.push(format!("warped length {} != {t}", row.len()));
            }
            if !monotone {
                bad.push("warping a monotone ramp broke monotonicity".to_string());
            }
            json!({ "output": Value::Array(row.iter().map(|&v| json!(v)).collect()),
                    "length": row.len(), "monotone": monotone })
        }

        // ---------------------------------------------------------- model
        "conv_stage_lengths" => {
            let t = p_usize(p, "t")?;
            let config = ModelConfig::tiny();
            let mut cur = t;
            let mut lengths = Vec::new();
            for _ in 0..4 {
                cur /= 2;
                lengths.push(cur);
            }
            if *lengths.last().unwrap() != config.conv_out_len(t) {
                bad.push("stage lengths disagree with conv_out_len".to_string());
            }
            json!({ "lengths": lengths })
        }

        "adaptive_pool_small" => {
            let out_len = p_usize(p, "out_len")?;
            let input = read_json(&dir.join(&fixture.inputs[0]))?;
            let channels = input
                .as_array()
                .ok_or_else(|| CoreError::validation("pool input: expected 3-d array"))?;
            let f = channels.len();
            let mut c = 0usize;
            let mut t = 0usize;
            let mut flat: Vec<f64> = Vec::new();
            for fv in channels {
                let m = mat_f64(fv, "pool input")?;
                c = m.len();
                t = m.first().map_or(0, Vec::len);
                flat.extend(m.into_iter().flatten());
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&[1, f, c, t]), flat)
                .map_err(|e| CoreError::validation(format!("pool input: {e}")))?;
            let graph = Graph::<f64>::new();
            graph.set_grad_enabled(false);
            let pooled = graph.constant(arr).dap_pool(out_len);
            let v = pooled.value();
            let mut rows = Vec::with_capacity(f);
            for fi in 0..f {
                let mut row = Vec::with_capacity(out_len);
                for l in 0..out_len {
                    row.push(json!(v[[0, fi, l]]));
                }
                rows.push(Value::Array(row));
            }
            json!({ "output": Value::Array(rows) })
        }

        "channel_permutation" => {
            let config = ModelConfig::tiny();
            let (b, c, t) = (p_usize(p, "b")?, p_usize(p, "c")?, p_usize(p, "t")?);
            let perm: Vec<usize> = p
                .get("perm")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_u64).map(|v| v as usize).collect())
                .ok_or_else(|| CoreError::validation("missing params.perm"))?;
            if perm.len() != c {
                return Err(CoreError::validation("perm length != c"));
            }
            let mut init = RngStream::from_seed(p_usize(p, "init_seed")? as u64)
                .child(purpose::INIT, &[0]);
            let store = init_params::<f32>(&config, None, &mut init)?;
            let mut data = RngStream::from_seed(p_usize(p, "data_seed")? as u64)
                .child(purpose::SYNTH, &[0]);
            let mut base = ArrayD::<f32>::zeros(IxDyn(&[b, c, t]));
            for v in base.iter_mut() {
                *v = data.normal(0.0, 1.0) as f32;
            }
            let graph = Graph::<f32>::new();
            graph.set_grad_enabled(false);
            let mut drop = RngStream::from_seed(0);
            let reference =
                backbone_forward(&graph, &store, &graph.constant(base.clone()), &config, &mut drop)?;
            let mut permuted = base.clone();
            for (dst, &src) in perm.iter().enumerate() {
                permuted
                    .slice_mut(ndarray::s![.., dst, ..])
                    .assign(&base.slice(ndarray::s![.., src, ..]));
            }
            let out =
                backbone_forward(&graph, &store, &graph.constant(permuted), &config, &mut drop)?;
            let max_abs = reference
                .value()
                .iter()
                .zip(out.value().iter())
                .map(|(a, b)| (a - b).abs() as f64)
                .fold(0.0, f64::max);
            if !(max_abs <= 1e-5) {
                bad.push(format!("channel permutation moved outputs by {max_abs} > 1e-5"));
            }
            json!({ "max_abs_diff": max_abs })
        }

        "head_param_count" => {
            let classes = p_usize(p, "classes")?;
            let count = count_parameters(&ModelConfig::full(), Some(classes))?;
            json!({ "params": count.classification_head.unwrap_or(0) })
        }

        "tiny_param_count" => {
            let config = ModelConfig::tiny();
            let count = count_parameters(&config, None)?;
            // Second route inside the implementation: enumerate an actual
            // initialized store and count trainable scalars.
            let mut rng = RngStream::from_seed(1).child(purpose::INIT, &[0]);
            let store = init_params::<f32>(&config, None, &mut rng)?;
            let enumerated = store.n_scalars(true);
            if enumerated != count.total_with_projection {
                bad.push(format!(
                    "store holds {enumerated} trainable scalars but accounting says {}",
                    count.total_with_projection
                ));
            }
            json!({
                "backbone": count.backbone,
                "projection_head": count.projection_head,
                "total": count.total_with_projection,
            })
        }

        "gradient_check" => {
            let loss = match p_str(p, "loss")? {
                "contrastive" => CheckLoss::Contrastive {
                    n_pairs: p_usize(p, "n_pairs")?,
                    temperature: p_f64(p, "temperature")?,
                },
                "classification" => CheckLoss::Classification {
                    batch: p_usize(p, "batch")?,
                    n_classes: p_usize(p, "n_classes")?,
                },
                other => {
                    return Err(CoreError::validation(format!("unknown loss {other:?}")))
                }
            };
            let report = gradient_check(
                &ModelConfig::tiny(),
                loss,
                p_usize(p, "seed")? as u64,
                p_usize(p, "min_samples")?,
            )?;
            if !(report.max_rel_err <= 1e-3) {
                bad.push(format!(
                    "finite differences disagree with backprop: {} at {}",
                    report.max_rel_err, report.worst
                ));
            }
            json!({ "max_rel_err": report.max_rel_err, "n_sampled": report.n_sampled })
        }

        // ----------------------------------------------------- contrastive
        "nt_xent_loss" => {
            let z = array2_from_value(&read_json(&dir.join(&fixture.inputs[0]))?, "embeddings")?;
            let graph = Graph::<f64>::new();
            graph.set_grad_enabled(false);
            let loss = nt_xent_loss(&graph.constant(z.into_dyn()), p_f64(p, "temperature")?)?;
            json!({ "loss": loss.value()[[]] })
        }

        "nt_xent_degenerate" => {
            let rows = p_usize(p, "rows")?;
            let dim = p_usize(p, "dim")?;
            let z = Array2::<f64>::from_elem((rows, dim), 0.7);
            let graph = Graph::<f64>::new();
            graph.set_grad_enabled(false);
            let loss = nt_xent_loss(&graph.constant(z.into_dyn()), p_f64(p, "temperature")?)?;
            let got = loss.value()[[]];
            let analytic = ((rows - 1) as f64).ln();
            if !((got - analytic).abs() <= 1e-9) {
                bad.push(format!("identical embeddings: loss {got} vs ln({}) = {analytic}", rows - 1));
            }
            json!({ "loss": got })
        }

        // -------------------------------------------------------- sampling
        "uniform_sampler" => {
            let n_windows = p_usize(p, "n_windows")?;
            let draws = p_usize(p, "draws")?;
            let mut rng =
                RngStream::from_seed(p_usize(p, "seed")? as u64).child(purpose::SAMPLE, &[0]);
            let mut counts = vec![0usize; n_windows];
            let picks = sample_pretrain_batch(n_windows, draws, &mut rng)?;
            for i in picks {
                counts[i] += 1;
            }
            let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
            let uniform = 1.0 / n_windows as f64;
            let max_dev = freqs.iter().map(|f| (f - uniform).abs()).fold(0.0, f64::max);
            let bound = p_f64(p, "bound")?;
            if !(max_dev <= bound) {
                bad.push(format!("draw frequencies deviate by {max_dev} > {bound}"));
            }
            json!({ "freqs": freqs, "max_dev": max_dev })
        }

        "balanced_draws" => {
            let rare = p_usize(p, "rare")?;
            let common = p_usize(p, "common")?;
            let draws = p_usize(p, "draws")?;
            let t = p_usize(p, "t")?;
            let mut entries = Vec::new();
            for i in 0..rare {
                entries.push(WindowMeta {
                    path: format!("rare{i}.ecgw"),
                    subject_id: "s_rare".to_string(),
                    record_id: "r_rare".to_string(),
                    window_index: i,
                    labels: vec!["RARE".to_string()],
                });
            }
            for i in 0..common {
                entries.push(WindowMeta {
                    path: format!("common{i}.ecgw"),
                    subject_id: format!("s_c{:02}", i / 4),
                    record_id: format!("r_c{i:03}"),
                    window_index: 0,
                    labels: vec!["COMMON".to_string()],
                });
            }
            let bank = WindowBank {
                fs: 64.0,
                window_len: t,
                leads: LeadId::ALL.to_vec(),
                entries,
            };
            let classes = vec!["RARE".to_string(), "COMMON".to_string()];
            let index = BalancedIndex::build(&bank, &classes)?;
            let mut rng =
                RngStream::from_seed(p_usize(p, "seed")? as u64).child(purpose::SAMPLE, &[1]);
            let picks = balanced_batch(&index, draws, &mut rng);
            let n_rare = picks.iter().filter(|&&i| i < rare).count();
            let freq = n_rare as f64 / draws as f64;
            let bound = p_f64(p, "bound")?;
            if !((freq - 0.5).abs() <= bound) {
                bad.push(format!("rare-class draw frequency {freq} outside 0.5 ± {bound}"));
            }
            json!({ "rare_freq": freq })
        }

        // ---------------------------------------------------- training runs
        "pretrain_curve" => {
            let train = tone_dataset(
                p_usize(p, "n_windows")?,
                p_usize(p, "t")?,
                p_usize(p, "data_seed")? as u64,
            )?;
            let val = tone_dataset(
                p_usize(p, "n_val")?,
                p_usize(p, "t")?,
                p_usize(p, "val_seed")? as u64,
            )?;
            let config = PretrainConfig {
                batch_size: p_usize(p, "batch_size")?,
                lr0: p_f64(p, "lr0")?,
                max_epochs: p_usize(p, "max_epochs")?,
                patience: p_usize(p, "max_epochs")?,
                min_delta: 0.0,
                strategy: PairStrategy::Base,
                seed: p_usize(p, "run_seed")? as u64,
                ..PretrainConfig::default()
            };
            let tmp = tempfile::tempdir().map_err(|e| CoreError::io(dir, e))?;
            let outcome = pretrain(
                &train,
                &val,
                &ModelConfig::tiny(),
                &config,
                &AugmentationSpec::default(),
                tmp.path(),
            )?;
            let fresh = read_curve_rows(&outcome.curve_path)?;
            let frozen = read_curve_rows(&dir.join(&fixture.inputs[0]))?;
            compare_curves(&frozen, &fresh, 1e-9, &mut bad);
            let first = outcome.state.history.first().map_or(f64::NAN, |r| r.train_loss);
            let last = outcome.state.history.last().map_or(f64::NAN, |r| r.train_loss);
            if !(last < first) {
                bad.push(format!("training loss did not drop: {first} → {last}"));
            }
            json!({ "first_train_loss": first, "last_train_loss": last })
        }

        "finetune_curve" => {
            let t = p_usize(p, "t")?;
            let train =
                two_tone_dataset(p_usize(p, "n_per_class")?, t, p_usize(p, "data_seed")? as u64)?;
            let val =
                two_tone_dataset(p_usize(p, "n_val_per_class")?, t, p_usize(p, "val_seed")? as u64)?;
            let classes = vec!["rhythm_sine".to_string(), "rhythm_square".to_string()];
            let config = FinetuneConfig {
                batch_size: p_usize(p, "batch_size")?,
                lr0: p_f64(p, "lr0")?,
                gamma: 0.97,
                max_epochs: p_usize(p, "max_epochs")?,
                patience: p_usize(p, "max_epochs")? + 1,
                min_delta: 0.0,
                seeds: vec![p_usize(p, "run_seed")? as u64],
                leadset: "12".to_string(),
                input_mode: InputMode::Dap,
            };
            let tmp = tempfile::tempdir().map_err(|e| CoreError::io(dir, e))?;
            let outcomes = train_supervised(
                &train,
                &val,
                &classes,
                &ModelConfig::tiny(),
                &config,
                tmp.path(),
            )?;
            let outcome = outcomes
                .first()
                .ok_or_else(|| CoreError::validation("no fine-tune outcome"))?;
            let fresh = read_curve_rows(&outcome.curve_path)?;
            let frozen = read_curve_rows(&dir.join(&fixture.inputs[0]))?;
            compare_curves(&frozen, &fresh, 1e-9, &mut bad);
            let first = outcome.state.history.first().map_or(f64::NAN, |r| r.train_loss);
            let last = outcome.state.history.last().map_or(f64::NAN, |r| r.train_loss);
            let drop_factor = p_f64(p, "drop_factor")?;
            if !(last <= drop_factor * first) {
                bad.push(format!(
                    "train loss fell only from {first} to {last}, above {drop_factor} × first"
                ));
            }
            json!({ "first_train_loss": first, "last_train_loss": last })
        }

        // ---------------------------------------------------------- losses
        "bce_mean" => {
            let probs =
                array2_from_value(&read_json(&dir.join(&fixture.inputs[0]))?, "probs")?;
            let targets =
                array2_from_value(&read_json(&dir.join(&fixture.inputs[1]))?, "targets")?;
            let graph = Graph::<f64>::new();
            graph.set_grad_enabled(false);
            let loss = graph
                .constant(probs.into_dyn())
                .bce_probs(&targets.into_dyn());
            json!({ "loss": loss.value()[[]] })
        }

        // --------------------------------------------------------- scoring
        "score_hand_case" => {
            let cs: Vec<String> = ["A", "B", "N"].iter().map(|s| s.to_string()).collect();
            let matrix = WeightMatrix::identity(&cs, "N")?;
            let truths =
                Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
            let preds =
                Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
            let score = cinc_score(&preds, &truths, &matrix)?;
            json!({ "score": score })
        }

        "score_aggregate" => {
            let scores = vec_f64(
                p.get("scores")
                    .ok_or_else(|| CoreError::validation("missing params.scores"))?,
                "scores",
            )?;
            let report = aggregate_report(&scores, "fixture", "12")?;
            json!({ "mean": report.mean, "std": report.std })
        }

        // ------------------------------------------------------- profiling
        "activation_budget" => {
            let config = ModelConfig::full();
            let batch = p_usize(p, "batch")?;
            let t = p_usize(p, "t")?;
            let full_c = p_usize(p, "full_channels")?;
            let full = analytic_activation_bytes(&config, batch, full_c, t)?;
            let single = analytic_activation_bytes(&config, batch, 1, t)?;
            if full.transformer_elements != single.transformer_elements {
                bad.push("transformer activation size depends on channel count".to_string());
            }
            if full.conv_elements != full_c * single.conv_elements {
                bad.push(format!(
                    "conv activations {} not exactly {full_c} × per-channel {}",
                    full.conv_elements, single.conv_elements
                ));
            }
            json!({
                "per_channel_conv_elements": single.conv_elements,
                "conv_elements_full": full.conv_elements,
                "ratio": full.conv_elements / single.conv_elements,
                "transformer_invariant": full.transformer_elements == single.transformer_elements,
            })
        }

        // ---------------------------------------------------------- binary
        "ecgw_bytes" => {
            let fs = p_f64(p, "fs")?;
            let t = p_usize(p, "t")?;
            let lead_codes: Vec<&str> = p
                .get("leads")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).collect())
                .ok_or_else(|| CoreError::validation("missing params.leads"))?;
            let leads: Vec<LeadId> = lead_codes
                .iter()
                .map(|c| {
                    LeadId::ALL
                        .iter()
                        .copied()
                        .find(|l| l.code() == *c)
                        .ok_or_else(|| CoreError::validation(format!("unknown lead {c:?}")))
                })
                .collect::<Result<_>>()?;
            let record = EcgRecord {
                subject_id: "gx".to_string(),
                record_id: "golden".to_string(),
                fs,
                leads: leads.clone(),
                samples: Array2::from_shape_fn((leads.len(), t), |(c, i)| {
                    i as f64 * 0.125 - c as f64 * 0.5
                }),
                labels: vec![],
            };
            let tmp = tempfile::tempdir().map_err(|e| CoreError::io(dir, e))?;
            let fresh_path = tmp.path().join("fresh.ecgw");
            write_record(&record, &fresh_path)?;
            let fresh = fs::read(&fresh_path).map_err(|e| CoreError::io(&fresh_path, e))?;
            let golden_path = dir.join(&fixture.inputs[0]);
            let golden = fs::read(&golden_path).map_err(|e| CoreError::io(&golden_path, e))?;
            if fresh != golden {
                bad.push(format!(
                    "serialized bytes differ from golden file ({} vs {} bytes)",
                    fresh.len(),
                    golden.len()
                ));
            }
            let reread = read_record(&golden_path)?;
            let roundtrip_err = reread
                .samples
                .iter()
                .zip(record.samples.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if reread.leads != leads || reread.fs != fs {
                bad.push("golden file decodes to different leads or rate".to_string());
            }
            if !(roundtrip_err <= 1e-7) {
                bad.push(format!("round-trip error {roundtrip_err} > 1e-7"));
            }
            json!({
                "n_bytes": golden.len(),
                "sha256": sha256_hex(&fresh),
                "roundtrip_max_err": roundtrip_err,
            })
        }

        other => {
            return Err(CoreError::validation(format!(
                "unknown fixture operation {other:?}"
            )))
        }
    };
    Ok((value, bad))
}

// ----------------------------------------------------------------- oracles

/// Run one oracle script (`python3 <script> <fixtures_dir>`) and parse its
/// stdout as a JSON object mapping fixture ids to keyed value objects.
/// Returns None when `python3` is not available on this machine.
pub fn run_oracle(dir: &Path, script: &str) -> Result<Option<Map<String, Value>>> {
    let path = dir.join(script);
    if !path.exists() {
        return Err(CoreError::validation(format!(
            "oracle script missing: {}",
            path.display()
        )));
    }
    let output = match std::process::Command::new("python3")
        .arg(&path)
        .arg(dir)
        .output()
    {
        Ok(o) => o,
        Err(_) => return Ok(None),
    };
    if !output.status.success() {
        return Err(CoreError::validation(format!(
            "oracle {script} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        )));
    }
    let value: Value = serde_json::from_slice(&output.stdout).map_err(|e| {
        CoreError::validation(format!("oracle {script}: bad JSON output: {e}"))
    })?;
    value
        .as_object()
        .cloned()
        .map(Some)
        .ok_or_else(|| CoreError::validation(format!("oracle {script}: expected a JSON object")))
}

/// Cross-check the manifest's frozen expected values against every oracle
/// script's independent recomputation. Each oracle reports values for the
/// fixtures it owns; every reported key must agree with the frozen value
/// within that fixture's tolerance. Returns one report per fixture that at
/// least one oracle covered, or None when `python3` is unavailable.
pub fn verify_against_oracles(dir: &Path) -> Result<Option<Vec<FixtureReport>>> {
    let manifest = FixtureManifest::load(&dir.join("manifest.json"))?;
    let scripts: std::collections::BTreeSet<&str> =
        manifest.fixtures.iter().map(|f| f.oracle.as_str()).collect();
    let mut oracle_values: Map<String, Value> = Map::new();
    for script in scripts {
        match run_oracle(dir, script)? {
            Some(values) => oracle_values.extend(values),
            None => return Ok(None),
        }
    }
    let mut reports = Vec::new();
    for fixture in &manifest.fixtures {
        let start = Instant::now();
        let mut details = Vec::new();
        match oracle_values.get(&fixture.id) {
            Some(got) => {
                // The oracle may cover a subset of keys; compare only those.
                if let (Value::Object(em), Value::Object(gm)) = (&fixture.expected, got) {
                    for (k, gv) in gm {
                        if let Some(ev) = em.get(k) {
                            compare_values(k, ev, gv, fixture.tolerance, &mut details);
                        }
                    }
                } else {
                    compare_values("", &fixture.expected, got, fixture.tolerance, &mut details);
                }
            }
            None => details.push("no oracle output for this fixture".to_string()),
        }
        reports.push(FixtureReport {
            id: fixture.id.clone(),
            passed: details.is_empty(),
            details,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Some(reports))
}

/// Format fixture reports as one status line each.
pub fn format_reports(reports: &[FixtureReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let status = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("[fixture] {:<28} {status} ({:.2}s)\n", r.id, r.elapsed_s));
        for d in &r.details {
            out.push_str(&format!("    {d}\n"));
        }
    }
    out
}

/// Locate the repository's `fixtures/` directory from a crate manifest dir,
/// walking upward until a directory containing `fixtures/manifest.json` is
/// found.
pub fn find_fixtures_dir(start: &Path) -> Option<PathBuf> {
    let mut cur = Some(start);
    while let Some(dir) = cur {
        let candidate = dir.join("fixtures");
        if candidate.join("manifest.json").exists() {
            return Some(candidate);
        }
        cur = dir.parent();
    }
    None
}

// ----------------------------------------------------------- fixture catalog

fn fixture(
    id: &str,
    operation: &str,
    inputs: &[&str],
    params: Value,
    tolerance: f64,
    origin: &str,
    oracle: &str,
) -> GoldenFixture {
    GoldenFixture {
        id: id.to_string(),
        operation: operation.to_string(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        params,
        expected: Value::Null,
        tolerance,
        origin: origin.to_string(),
        oracle: format!("oracles/{oracle}"),
    }
}

/// The full fixture catalog with `expected` unset. [`generate_fixtures`]
/// fills in the frozen inputs and expected values.
pub fn standard_fixtures() -> Vec<GoldenFixture> {
    vec![
        fixture(
            "synth_tachy_beat_rate",
            "synth_beat_rate",
            &["data/synth_normal_leadI.json", "data/synth_tachy_leadI.json"],
            json!({
                "seed": 2030, "n_subjects": 12, "records_per_subject": 2,
                "fs": 250.0, "duration_s": 15.0, "abnormal_prob": 0.5,
                "factor": 1.5, "noise_mv": 0.02,
            }),
            1e-9,
            "audited-run",
            "beats.py",
        ),
        fixture(
            "resample_ramp_endpoint_hold",
            "resample_linear_ramp",
            &[],
            json!({ "input": [[0.0, 1.0, 2.0, 3.0]], "fs_in": 2.0, "fs_out": 4.0 }),
            1e-12,
            "closed-form",
            "preprocess.py",
        ),
        fixture(
            "remove_mean_two_channels",
            "remove_mean",
            &["data/detrend_input.json"],
            json!({}),
            1e-12,
            "closed-form",
            "preprocess.py",
        ),
        fixture(
            "bandpass_stopband_60hz",
            "bandpass_gain",
            &[],
            json!({
                "order": 4, "low_hz": 0.5, "high_hz": 40.0, "fs": 500.0,
                "freq_hz": 60.0, "max_db_error": 2.0,
            }),
            1e-9,
            "closed-form",
            "preprocess.py",
        ),
        fixture(
            "bandpass_passband_10hz",
            "bandpass_gain",
            &[],
            json!({
                "order": 4, "low_hz": 0.5, "high_hz": 40.0, "fs": 500.0,
                "freq_hz": 10.0, "min_gain": 0.95,
            }),
            1e-9,
            "closed-form",
            "preprocess.py",
        ),
        fixture(
            "pipeline_midband_sine",
            "pipeline_sine",
            &["data/pipeline_window.json"],
            json!({
                "fs": 500.0, "freq_hz": 10.0, "duration_s": 10.0,
                "window_index": 1, "lead_row": 0,
            }),
            1e-9,
            "audited-run",
            "preprocess.py",
        ),
        fixture(
            "noise_std_large_sample",
            "noise_std",
            &[],
            json!({ "sigma": 0.1, "t": 100_000, "seed": 77, "lo": 0.099, "hi": 0.101 }),
            1e-9,
            "audited-run",
            "augment.py",
        ),
        fixture(
            "crop_resize_half_ramp",
            "crop_resize_ramp",
            &[],
            json!({ "t": 64, "fraction": 0.5, "seed": 101 }),
            1e-9,
            "audited-run",
            "augment.py",
        ),
        fixture(
            "time_warp_monotone_ramp",
            "time_warp_ramp",
            &[],
            json!({ "t": 96, "seed": 102 }),
            1e-9,
            "audited-run",
            "augment.py",
        ),
        fixture(
            "conv_lengths_tiny_192",
            "conv_stage_lengths",
            &[],
            json!({ "t": 192 }),
            0.0,
            "closed-form",
            "model_arith.py",
        ),
        fixture(
            "adaptive_pool_two_per_bin",
            "adaptive_pool_small",
            &["data/dap_input.json"],
            json!({ "out_len": 12 }),
            1e-12,
            "closed-form",
            "model_arith.py",
        ),
        fixture(
            "channel_permutation_tiny",
            "channel_permutation",
            &[],
            json!({
                "init_seed": 17, "data_seed": 18, "b": 1, "c": 12, "t": 192,
                "perm": [5, 2, 11, 0, 7, 4, 9, 1, 10, 3, 8, 6],
            }),
            1e-12,
            "audited-run",
            "model_arith.py",
        ),
        fixture(
            "classify_head_23_classes",
            "head_param_count",
            &[],
            json!({ "classes": 23 }),
            0.0,
            "closed-form",
            "model_arith.py",
        ),
        fixture(
            "tiny_parameter_budget",
            "tiny_param_count",
            &[],
            json!({}),
            0.0,
            "closed-form",
            "model_arith.py",
        ),
        fixture(
            "gradcheck_contrastive_tiny",
            "gradient_check",
            &[],
            json!({
                "loss": "contrastive", "n_pairs": 4, "temperature": 0.5,
                "seed": 61, "min_samples": 60,
            }),
            1e-12,
            "audited-run",
            "model_arith.py",
        ),
        fixture(
            "gradcheck_classification_tiny",
            "gradient_check",
            &[],
            json!({
                "loss": "classification", "batch": 4, "n_classes": 5,
                "seed": 62, "min_samples": 60,
            }),
            1e-12,
            "audited-run",
            "model_arith.py",
        ),
        fixture(
            "nt_xent_two_pairs",
            "nt_xent_loss",
            &["data/ntxent_embeddings.json"],
            json!({ "temperature": 0.5 }),
            1e-9,
            "closed-form",
            "contrastive.py",
        ),
        fixture(
            "nt_xent_identical_rows",
            "nt_xent_degenerate",
            &[],
            json!({ "rows": 8, "dim": 6, "temperature": 0.5 }),
            1e-9,
            "closed-form",
            "contrastive.py",
        ),
        fixture(
            "pretrain_sampler_uniform",
            "uniform_sampler",
            &[],
            json!({ "n_windows": 10, "draws": 100_000, "seed": 55, "bound": 0.005 }),
            1e-9,
            "audited-run",
            "sampling.py",
        ),
        fixture(
            "balanced_sampler_one_vs_99",
            "balanced_draws",
            &[],
            json!({ "rare": 1, "common": 99, "draws": 10_000, "seed": 66, "bound": 0.02, "t": 32 }),
            1e-9,
            "audited-run",
            "sampling.py",
        ),
        fixture(
            "pretrain_smoke_curve",
            "pretrain_curve",
            &["data/pretrain_curve.csv"],
            json!({
                "n_windows": 96, "n_val": 16, "t": 192, "data_seed": 21, "val_seed": 22,
                "batch_size": 16, "lr0": 1e-3, "max_epochs": 5, "run_seed": 7,
            }),
            1e-9,
            "audited-run",
            "curves.py",
        ),
        fixture(
            "finetune_smoke_curve",
            "finetune_curve",
            &["data/finetune_curve.csv"],
            json!({
                "n_per_class": 16, "n_val_per_class": 4, "t": 192,
                "data_seed": 21, "val_seed": 22, "batch_size": 8, "lr0": 1e-3,
                "max_epochs": 20, "run_seed": 0, "drop_factor": 0.7,
            }),
            1e-9,
            "audited-run",
            "curves.py",
        ),
        fixture(
            "bce_brute_force",
            "bce_mean",
            &["data/bce_probs.json", "data/bce_targets.json"],
            json!({}),
            1e-12,
            "closed-form",
            "losses.py",
        ),
        fixture(
            "score_two_recordings",
            "score_hand_case",
            &[],
            json!({}),
            1e-12,
            "hand-computed",
            "scoring.py",
        ),
        fixture(
            "score_mean_and_std",
            "score_aggregate",
            &[],
            json!({ "scores": [0.59, 0.61] }),
            1e-12,
            "closed-form",
            "scoring.py",
        ),
        fixture(
            "conv_activation_scaling",
            "activation_budget",
            &[],
            json!({ "batch": 1, "t": 2500, "full_channels": 12 }),
            0.0,
            "closed-form",
            "model_arith.py",
        ),
        fixture(
            "ecgw_golden_bytes",
            "ecgw_bytes",
            &["data/golden.ecgw"],
            json!({ "fs": 500.0, "leads": ["I", "V2"], "t": 16 }),
            0.0,
            "byte-layout",
            "binary_io.py",
        ),
    ]
}

// --------------------------------------------------------------- generation

/// Write the frozen input files one fixture needs, returning extra params
/// discovered during generation (merged into the descriptor before the
/// expected values are computed). Deterministic: rerunning regenerates
/// byte-identical data.
fn generate_data(fixture: &GoldenFixture, dir: &Path) -> Result<Option<Value>> {
    let p = &fixture.params;
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| CoreError::io(&data_dir, e))?;
    let write_json = |name: &str, value: &Value| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, serde_json::to_string(value)?).map_err(|e| CoreError::io(&path, e))
    };
    match fixture.operation.as_str() {
        "synth_beat_rate" => {
            let factor = p_f64(p, "factor")?;
            let config = SynthConfig {
                n_subjects: p_usize(p, "n_subjects")?,
                records_per_subject: p_usize(p, "records_per_subject")?,
                fs: p_f64(p, "fs")?,
                duration_s: p_f64(p, "duration_s")?,
                normal_class: "NORMAL".to_string(),
                abnormal_classes: vec![ClassSpec {
                    code: "TACHY".to_string(),
                    effect: ClassEffect::BeatRate { factor },
                }],
                abnormal_prob: p_f64(p, "abnormal_prob")?,
                noise_mv: p_f64(p, "noise_mv")?,
            };
            let tmp = tempfile::tempdir().map_err(|e| CoreError::io(dir, e))?;
            let manifest = synth_dataset(&config, p_usize(p, "seed")? as u64, tmp.path())?;
            // First subject (in manifest order) holding both a purely normal
            // record and a TACHY record with countable peaks in each.
            let mut chosen: Option<(EcgRecord, EcgRecord)> = None;
            for (subject, indices) in manifest.subjects() {
                let normal = indices.iter().find(|&&i| {
                    manifest.records[i].labels.iter().all(|l| l == "NORMAL")
                        && !manifest.records[i].labels.is_empty()
                });
                let tachy = indices
                    .iter()
                    .find(|&&i| manifest.records[i].labels.iter().any(|l| l == "TACHY"));
                if let (Some(&ni), Some(&ti)) = (normal, tachy) {
                    let n = manifest.load_record(&manifest.records[ni], tmp.path())?;
                    let t = manifest.load_record(&manifest.records[ti], tmp.path())?;
                    let ok = |r: &EcgRecord| {
                        mean_peak_interval(&r.samples.row(0).to_vec(), config.fs).is_some()
                    };
                    if ok(&n) && ok(&t) {
                        chosen = Some((n, t));
                        break;
                    }
                    let _ = subject;
                }
            }
            let (normal, tachy) = chosen.ok_or_else(|| {
                CoreError::validation(
                    "no subject produced both a normal and a fast record; adjust the seed"
                        .to_string(),
                )
            })?;
            let row = |r: &EcgRecord| -> Value {
                Value::Array(r.samples.row(0).iter().map(|&v| json!(v)).collect())
            };
            write_json(&fixture.inputs[0], &row(&normal))?;
            write_json(&fixture.inputs[1], &row(&tachy))?;
            Ok(Some(json!({
                "normal_record": normal.record_id,
                "tachy_record": tachy.record_id,
            })))
        }

        "remove_mean" => {
            let mut rng = RngStream::from_seed(2025).child(purpose::SYNTH, &[5]);
            let input = Array2::from_shape_fn((2, 64), |(c, _)| {
                rng.normal(0.3 + 0.5 * c as f64, 1.2)
            });
            write_json(&fixture.inputs[0], &array2_to_value(&input))?;
            Ok(None)
        }

        "pipeline_sine" => {
            let rec = sine_record(p_f64(p, "fs")?, p_f64(p, "freq_hz")?, p_f64(p, "duration_s")?);
            let windows = preprocess_pipeline(&rec, &PreprocessConfig::default())?;
            let wi = p_usize(p, "window_index")?;
            let row = p_usize(p, "lead_row")?;
            let window = windows
                .get(wi)
                .ok_or_else(|| CoreError::validation(format!("window {wi} out of range")))?;
            let values: Vec<Value> = window.samples.row(row).iter().map(|&v| json!(v)).collect();
            write_json(&fixture.inputs[0], &Value::Array(values))?;
            Ok(None)
        }

        "adaptive_pool_small" => {
            let mut rng = RngStream::from_seed(2025).child(purpose::SYNTH, &[6]);
            let (f, c, t) = (2usize, 3usize, 24usize);
            let mut channels = Vec::with_capacity(f);
            for _ in 0..f {
                let m = Array2::from_shape_fn((c, t), |_| rng.normal(0.0, 1.0));
                channels.push(array2_to_value(&m));
            }
            write_json(&fixture.inputs[0], &Value::Array(channels))?;
            Ok(None)
        }

        "nt_xent_loss" => {
            let mut rng = RngStream::from_seed(2025).child(purpose::SYNTH, &[3]);
            let z = Array2::from_shape_fn((8, 6), |_| rng.normal(0.0, 1.0));
            write_json(&fixture.inputs[0], &array2_to_value(&z))?;
            Ok(None)
        }

        "bce_mean" => {
            let mut rng = RngStream::from_seed(2025).child(purpose::SYNTH, &[4]);
            let probs = Array2::from_shape_fn((4, 5), |_| rng.uniform(0.02, 0.98));
            let targets =
                Array2::from_shape_fn((4, 5), |_| if rng.uniform(0.0, 1.0) < 0.4 { 1.0 } else { 0.0 });
            write_json(&fixture.inputs[0], &array2_to_value(&probs))?;
            write_json(&fixture.inputs[1], &array2_to_value(&targets))?;
            Ok(None)
        }

        "pretrain_curve" => {
            let train = tone_dataset(
                p_usize(p, "n_windows")?,
                p_usize(p, "t")?,
                p_usize(p, "data_seed")? as u64,
            )?;
            let val = tone_dataset(
                p_usize(p, "n_val")?,
                p_usize(p, "t")?,
                p_usize(p, "val_seed")? as u64,
            )?;
            let config = PretrainConfig {
                batch_size: p_usize(p, "batch_size")?,
                lr0: p_f64(p, "lr0")?,
                max_epochs: p_usize(p, "max_epochs")?,
                patience: p_usize(p, "max_epochs")?,
                min_delta: 0.0,
                strategy: PairStrategy::Base,
                seed: p_usize(p, "run_seed")? as u64,
                ..PretrainConfig::default()
            };
            let tmp = tempfile::tempdir().map_err(|e| CoreError::io(dir, e))?;
            let outcome = pretrain(
                &train,
                &val,
                &ModelConfig::tiny(),
                &config,
                &AugmentationSpec::default(),
                tmp.path(),
            )?;
            let dst = dir.join(&fixture.inputs[0]);
            fs::copy(&outcome.curve_path, &dst).map_err(|e| CoreError::io(&dst, e))?;
            Ok(None)
        }

        "finetune_curve" => {
            let t = p_usize(p, "t")?;
            let train =
                two_tone_dataset(p_usize(p, "n_per_class")?, t, p_usize(p, "data_seed")? as u64)?;
            let val =
                two_tone_dataset(p_usize(p, "n_val_per_class")?, t, p_usize(p, "val_seed")? as u64)?;
            let classes = vec!["rhythm_sine".to_string(), "rhythm_square".to_string()];
            let config = FinetuneConfig {
                batch_size: p_usize(p, "batch_size")?,
                lr0: p_f64(p, "lr0")?,
                gamma: 0.97,
                max_epochs: p_usize(p, "max_epochs")?,
                patience: p_usize(p, "max_epochs")? + 1,
                min_delta: 0.0,
                seeds: vec![p_usize(p, "run_seed")? as u64],
                leadset: "12".to_string(),
                input_mode: InputMode::Dap,
            };
            let tmp = tempfile::tempdir().map_err(|e| CoreError::io(dir, e))?;
            let outcomes = train_supervised(
                &train,
                &val,
                &classes,
                &ModelConfig::tiny(),
                &config,
                tmp.path(),
            )?;
            let outcome = outcomes
                .first()
                .ok_or_else(|| CoreError::validation("no fine-tune outcome"))?;
            let dst = dir.join(&fixture.inputs[0]);
            fs::copy(&outcome.curve_path, &dst).map_err(|e| CoreError::io(&dst, e))?;
            Ok(None)
        }

        "ecgw_bytes" => {
            let fs_hz = p_f64(p, "fs")?;
            let t = p_usize(p, "t")?;
            let lead_codes: Vec<&str> = p
                .get("leads")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).collect())
                .ok_or_else(|| CoreError::validation("missing params.leads"))?;
            let leads: Vec<LeadId> = lead_codes
                .iter()
                .map(|c| {
                    LeadId::ALL
                        .iter()
                        .copied()
                        .find(|l| l.code() == *c)
                        .ok_or_else(|| CoreError::validation(format!("unknown lead {c:?}")))
                })
                .collect::<Result<_>>()?;
            let record = EcgRecord {
                subject_id: "gx".to_string(),
                record_id: "golden".to_string(),
                fs: fs_hz,
                leads: leads.clone(),
                samples: Array2::from_shape_fn((leads.len(), t), |(c, i)| {
                    i as f64 * 0.125 - c as f64 * 0.5
                }),
                labels: vec![],
            };
            write_record(&record, &dir.join(&fixture.inputs[0]))?;
            Ok(None)
        }

        // Everything else derives its inputs from params alone.
        _ => Ok(None),
    }
}

fn merge_params(base: &mut Value, patch: Value) {
    if let (Value::Object(bm), Value::Object(pm)) = (base, patch) {
        for (k, v) in pm {
            bm.insert(k, v);
        }
    }
}

/// Regenerate the whole fixtures directory: frozen inputs, expected values
/// (computed through the main implementation after its in-arm properties
/// pass), and `manifest.json`. Oracle scripts are tracked source files and
/// are not touched. Fails loudly if any fixture violates its own
/// properties, so a bad run can never be frozen.
pub fn generate_fixtures(dir: &Path) -> Result<FixtureManifest> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut fixtures = standard_fixtures();
    for fixture in &mut fixtures {
        if let Some(patch) = generate_data(fixture, dir)? {
            merge_params(&mut fixture.params, patch);
        }
        let (value, violations) = recompute_fixture(fixture, dir)?;
        if !violations.is_empty() {
            return Err(CoreError::validation(format!(
                "fixture {:?} violated its properties at generation time: {}",
                fixture.id,
                violations.join("; ")
            )));
        }
        fixture.expected = value;
    }
    let manifest = FixtureManifest { fixtures };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
