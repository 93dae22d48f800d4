//! Signal storage: lead identities, records and windows, the ECGW binary
//! file format, dataset manifests, subject-stratified splitting, and a
//! deterministic synthetic 12-lead generator.
//!
//! An ECGW file stores one record's signal: magic `"ECGW"`, version `u16`,
//! channel count `u16`, sample count `u32`, sampling rate `f64`, a reserved
//! `u64`, one lead-tag byte per channel, then channel-major `f32` samples,
//! all little-endian (28-byte fixed header). A record's *identity* —
//! subject, record id, labels — lives in the JSON manifest next to the
//! files; [`read_record`] returns those fields empty and
//! [`DatasetManifest::load_record`] fills them in.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{purpose, RngStream};

/// The twelve standard leads with fixed integer tags 0–11.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LeadId {
    I,
    II,
    III,
    #[serde(rename = "aVR")]
    AVR,
    #[serde(rename = "aVL")]
    AVL,
    #[serde(rename = "aVF")]
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl LeadId {
    /// All leads in tag order.
    pub const ALL: [LeadId; 12] = [
        LeadId::I,
        LeadId::II,
        LeadId::III,
        LeadId::AVR,
        LeadId::AVL,
        LeadId::AVF,
        LeadId::V1,
        LeadId::V2,
        LeadId::V3,
        LeadId::V4,
        LeadId::V5,
        LeadId::V6,
    ];

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&l| l == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Result<LeadId> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| CoreError::validation(format!("unknown lead tag {tag}")))
    }

    pub fn code(self) -> &'static str {
        match self {
            LeadId::I => "I",
            LeadId::II => "II",
            LeadId::III => "III",
            LeadId::AVR => "aVR",
            LeadId::AVL => "aVL",
            LeadId::AVF => "aVF",
            LeadId::V1 => "V1",
            LeadId::V2 => "V2",
            LeadId::V3 => "V3",
            LeadId::V4 => "V4",
            LeadId::V5 => "V5",
            LeadId::V6 => "V6",
        }
    }

    pub fn from_code(code: &str) -> Result<LeadId> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.code() == code)
            .ok_or_else(|| CoreError::validation(format!("unknown lead code {code:?}")))
    }
}

/// Validate a (leads, samples, fs) triple shared by records and windows.
fn validate_signal(leads: &[LeadId], samples: &Array2<f64>, fs: f64) -> Result<()> {
    if !(fs.is_finite() && fs > 0.0) {
        return Err(CoreError::validation(format!("sampling rate must be positive, got {fs}")));
    }
    if leads.is_empty() {
        return Err(CoreError::validation("record must have at least one lead"));
    }
    let mut seen = BTreeSet::new();
    for l in leads {
        if !seen.insert(*l) {
            return Err(CoreError::validation(format!("duplicate lead {}", l.code())));
        }
    }
    if samples.nrows() != leads.len() {
        return Err(CoreError::validation(format!(
            "sample rows {} != lead count {}",
            samples.nrows(),
            leads.len()
        )));
    }
    if samples.ncols() == 0 {
        return Err(CoreError::validation("record must have at least one sample"));
    }
    if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::validation(format!("non-finite sample {v}")));
    }
    Ok(())
}

/// One recording: identity, sampling rate, ordered leads, a C×T sample
/// matrix in millivolts, and the multi-label class codes.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub subject_id: String,
    pub record_id: String,
    pub fs: f64,
    pub leads: Vec<LeadId>,
    pub samples: Array2<f64>,
    pub labels: Vec<String>,
}

impl EcgRecord {
    pub fn validate(&self) -> Result<()> {
        validate_signal(&self.leads, &self.samples, self.fs)
    }

    pub fn n_leads(&self) -> usize {
        self.leads.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }
}

/// A fixed-duration slice of a record; inherits the record's labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub subject_id: String,
    pub record_id: String,
    /// Position of this window within its parent record.
    pub window_index: usize,
    pub fs: f64,
    pub leads: Vec<LeadId>,
    pub samples: Array2<f64>,
    pub labels: Vec<String>,
}

impl Window {
    pub fn validate(&self) -> Result<()> {
        validate_signal(&self.leads, &self.samples, self.fs)
    }

    pub fn n_leads(&self) -> usize {
        self.leads.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }
}

/// Keep only `leadset` rows, in `leadset` order; values copied unchanged.
pub fn select_leads(window: &Window, leadset: &[LeadId]) -> Result<Window> {
    let mut rows = Vec::with_capacity(leadset.len());
    for lead in leadset {
        let idx = window
            .leads
            .iter()
            .position(|l| l == lead)
            .ok_or_else(|| CoreError::validation(format!("lead {} absent", lead.code())))?;
        rows.push(idx);
    }
    let t = window.n_samples();
    let mut samples = Array2::<f64>::zeros((rows.len(), t));
    for (out_row, &in_row) in rows.iter().enumerate() {
        samples.row_mut(out_row).assign(&window.samples.row(in_row));
    }
    Ok(Window {
        subject_id: window.subject_id.clone(),
        record_id: window.record_id.clone(),
        window_index: window.window_index,
        fs: window.fs,
        leads: leadset.to_vec(),
        samples,
        labels: window.labels.clone(),
    })
}

const ECGW_MAGIC: &[u8; 4] = b"ECGW";
const ECGW_VERSION: u16 = 1;
/// magic + version + n_channels + n_samples + fs + reserved.
const ECGW_HEADER_BYTES: usize = 4 + 2 + 2 + 4 + 8 + 8;

/// Serialize a record's signal to the ECGW format (whole-file atomic:
/// written to a sibling temp file and renamed into place).
///
/// Samples are stored at single precision; values are quantized to the
/// nearest `f32` on write, so a record round-trips bit-exactly exactly when
/// its samples are `f32`-representable (the synthetic generator only emits
/// such values). Identity fields are not stored — see the module docs.
pub fn write_record(record: &EcgRecord, path: &Path) -> Result<()> {
    record.validate()?;
    let n_channels = record.n_leads();
    let n_samples = record.n_samples();
    if n_channels > u16::MAX as usize {
        return Err(CoreError::validation("too many channels for ECGW"));
    }
    if n_samples > u32::MAX as usize {
        return Err(CoreError::validation("too many samples for ECGW"));
    }
    let mut buf = Vec::with_capacity(ECGW_HEADER_BYTES + n_channels + 4 * n_channels * n_samples);
    buf.extend_from_slice(ECGW_MAGIC);
    buf.extend_from_slice(&ECGW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n_channels as u16).to_le_bytes());
    buf.extend_from_slice(&(n_samples as u32).to_le_bytes());
    buf.extend_from_slice(&record.fs.to_le_bytes());
    buf.extend_from_slice(&0u64.to_le_bytes());
    for lead in &record.leads {
        buf.push(lead.tag());
    }
    for &v in record.samples.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let io_err = |source| CoreError::io(path, source);
    let tmp = path.with_extension("ecgw.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&buf).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

/// Parse an ECGW file. The returned record carries empty identity fields
/// (subject, record id, labels); manifest loaders fill those in.
pub fn read_record(path: &Path) -> Result<EcgRecord> {
    let io_err = |source| CoreError::io(path, source);
    let fmt_err = |reason: &str| CoreError::format(path, reason);
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if bytes.len() < ECGW_HEADER_BYTES {
        return Err(fmt_err("truncated header"));
    }
    if &bytes[0..4] != ECGW_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != ECGW_VERSION {
        return Err(fmt_err(&format!("unsupported version {version}")));
    }
    let n_channels = u16::from_le_bytes(bytes[6..8].try_into().unwrap()) as usize;
    let n_samples = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let fs = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    // bytes[20..28] reserved
    let expect = ECGW_HEADER_BYTES + n_channels + 4 * n_channels * n_samples;
    if bytes.len() < ECGW_HEADER_BYTES + n_channels {
        return Err(fmt_err("truncated header"));
    }
    if bytes.len() != expect {
        return Err(fmt_err(&format!(
            "payload size {} != expected {expect}",
            bytes.len()
        )));
    }
    let mut leads = Vec::with_capacity(n_channels);
    let mut seen = BTreeSet::new();
    for i in 0..n_channels {
        let lead = LeadId::from_tag(bytes[ECGW_HEADER_BYTES + i])
            .map_err(|_| fmt_err("unknown lead tag"))?;
        if !seen.insert(lead) {
            return Err(fmt_err("duplicate lead id"));
        }
        leads.push(lead);
    }
    let mut samples = Array2::<f64>::zeros((n_channels, n_samples));
    let data = &bytes[ECGW_HEADER_BYTES + n_channels..];
    for (i, v) in samples.iter_mut().enumerate() {
        let off = 4 * i;
        *v = f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64;
    }
    let record = EcgRecord {
        subject_id: String::new(),
        record_id: String::new(),
        fs,
        leads,
        samples,
        labels: Vec::new(),
    };
    record.validate()?;
    Ok(record)
}

/// One manifest row describing an ECGW file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub record_id: String,
    /// Path to the ECGW file, relative to the manifest's directory.
    pub path: String,
    pub n_leads: usize,
    pub n_samples: usize,
    pub fs: f64,
    pub labels: Vec<String>,
    /// Corpus-of-origin tag used by source-stratified splitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// Dataset index: class list, provenance note, and one entry per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub provenance: String,
    pub records: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let class_set: BTreeSet<&str> = self.classes.iter().map(|s| s.as_str()).collect();
        if class_set.len() != self.classes.len() {
            return Err(CoreError::validation("duplicate class codes"));
        }
        for e in &self.records {
            if e.subject_id.is_empty() {
                return Err(CoreError::validation(format!(
                    "record {:?} has empty subject_id",
                    e.record_id
                )));
            }
            for l in &e.labels {
                if !class_set.contains(l.as_str()) {
                    return Err(CoreError::validation(format!(
                        "record {:?} label {l:?} not in class list",
                        e.record_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let io_err = |source| CoreError::io(path, source);
        let json = serde_json::to_string_pretty(self)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json.as_bytes()).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let io_err = |source| CoreError::io(path, source);
        let text = fs::read_to_string(path).map_err(io_err)?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    /// Read one entry's ECGW file and attach the manifest's identity fields.
    ///
    /// `base_dir` is the directory the entry paths are relative to
    /// (normally the manifest's own directory).
    pub fn load_record(&self, entry: &ManifestEntry, base_dir: &Path) -> Result<EcgRecord> {
        let mut record = read_record(&base_dir.join(&entry.path))?;
        record.subject_id = entry.subject_id.clone();
        record.record_id = entry.record_id.clone();
        record.labels = entry.labels.clone();
        Ok(record)
    }

    /// Subject ids in sorted order with the indices of their records.
    pub fn subjects(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.records.iter().enumerate() {
            map.entry(e.subject_id.clone()).or_default().push(i);
        }
        map
    }
}

/// How subjects are grouped into strata before splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratify {
    /// Group by the sorted union of label codes across a subject's records.
    LabelCombination,
    /// Group by the `source` tag (records without one share a stratum).
    Source,
}

/// Split ratios, seed, and stratification mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratify: Stratify,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&r| !(0.0..=1.0).contains(&r) || !r.is_finite()) {
            return Err(CoreError::validation("split ratios must lie in [0, 1]"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::validation(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Apportion `n` items to the three splits by largest remainder; each count
/// is within 1 of `n · ratio`.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let targets: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // Largest fractional part first; ties resolve to train, then val, then test.
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Split a manifest into subject-disjoint train/val/test manifests.
///
/// Subjects are grouped into strata (by label combination or source tag),
/// each stratum is shuffled deterministically from the spec seed and
/// apportioned by largest remainder, so per-stratum split sizes are within
/// ±1 subject of the exact ratio targets. Strata with fewer subjects than
/// splits (3) fall back to one shared pool so tiny strata cannot force
/// empty splits.
pub fn split_dataset(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    manifest.validate()?;
    if manifest.records.is_empty() {
        return Err(CoreError::validation("cannot split an empty manifest"));
    }
    let subjects = manifest.subjects();
    let n_nonzero = [spec.train, spec.val, spec.test]
        .iter()
        .filter(|&&r| r > 0.0)
        .count();
    if subjects.len() < n_nonzero {
        return Err(CoreError::validation(format!(
            "{} subjects cannot populate {} non-empty splits",
            subjects.len(),
            n_nonzero
        )));
    }

    // Stratum key per subject.
    let stratum_of = |recs: &[usize]| -> String {
        match spec.stratify {
            Stratify::LabelCombination => {
                let mut labels: BTreeSet<&str> = BTreeSet::new();
                for &ri in recs {
                    for l in &manifest.records[ri].labels {
                        labels.insert(l);
                    }
                }
                labels.into_iter().collect::<Vec<_>>().join("|")
            }
            Stratify::Source => {
                let mut sources: BTreeSet<&str> = BTreeSet::new();
                for &ri in recs {
                    sources.insert(manifest.records[ri].source.as_deref().unwrap_or(""));
                }
                sources.into_iter().collect::<Vec<_>>().join("|")
            }
        }
    };

    let mut strata: BTreeMap<String, Vec<&String>> = BTreeMap::new();
    for (subject, recs) in &subjects {
        strata.entry(stratum_of(recs)).or_default().push(subject);
    }
    // Small strata share one pool (deterministic: keyed under a reserved name).
    let mut pool: Vec<&String> = Vec::new();
    strata.retain(|_, members| {
        if members.len() < 3 {
            pool.append(members);
            false
        } else {
            true
        }
    });
    if !pool.is_empty() {
        pool.sort();
        strata.insert(String::from("\u{0}pool"), pool);
    }

    let ratios = [spec.train, spec.val, spec.test];
    let mut split_subjects: [BTreeSet<&String>; 3] = Default::default();
    for (si, (_, mut members)) in strata.into_iter().enumerate() {
        members.sort();
        let mut rng = RngStream::from_seed(spec.seed).child(purpose::SPLIT, &[si as u64]);
        rng.shuffle(&mut members);
        let counts = apportion(members.len(), ratios);
        let mut cursor = 0usize;
        for (k, &cnt) in counts.iter().enumerate() {
            for m in &members[cursor..cursor + cnt] {
                split_subjects[k].insert(m);
            }
            cursor += cnt;
        }
    }

    let build = |keep: &BTreeSet<&String>| DatasetManifest {
        classes: manifest.classes.clone(),
        provenance: manifest.provenance.clone(),
        records: manifest
            .records
            .iter()
            .filter(|e| keep.contains(&e.subject_id))
            .cloned()
            .collect(),
    };
    Ok((
        build(&split_subjects[0]),
        build(&split_subjects[1]),
        build(&split_subjects[2]),
    ))
}

/// Signal signature of one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassEffect {
    /// Multiply the beat rate (interval scales by 1/factor).
    BeatRate { factor: f64 },
    /// Multiply the beat-template amplitude.
    Amplitude { factor: f64 },
    /// Multiply a fixed subset of leads by a gain.
    LeadGain { leads: Vec<LeadId>, gain: f64 },
    /// Add a fixed-frequency sinusoid to all leads.
    Oscillation { freq_hz: f64, amplitude: f64 },
}

/// One abnormal class the generator can imprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub code: String,
    pub effect: ClassEffect,
}

/// Synthetic generator settings. The generator always produces 12 leads as
/// fixed linear projections of a two-component beat source plus per-lead
/// noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub records_per_subject: usize,
    pub fs: f64,
    pub duration_s: f64,
    /// Class code meaning "no abnormality"; labels every record that drew
    /// no abnormal class.
    pub normal_class: String,
    /// Abnormal classes; each is present independently with
    /// `abnormal_prob`.
    pub abnormal_classes: Vec<ClassSpec>,
    pub abnormal_prob: f64,
    /// Per-lead Gaussian noise level in millivolts.
    pub noise_mv: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.records_per_subject == 0 {
            return Err(CoreError::validation("need at least one subject and record"));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(CoreError::validation("fs must be positive"));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(CoreError::validation("duration must be positive"));
        }
        if (self.duration_s * self.fs).round() < 1.0 {
            return Err(CoreError::validation("duration too short for one sample"));
        }
        if !(0.0..=1.0).contains(&self.abnormal_prob) {
            return Err(CoreError::validation("abnormal_prob must lie in [0, 1]"));
        }
        if self.abnormal_classes.len() + 1 > 23 {
            return Err(CoreError::validation("at most 23 classes (incl. normal)"));
        }
        let mut codes: BTreeSet<&str> = BTreeSet::new();
        codes.insert(self.normal_class.as_str());
        for c in &self.abnormal_classes {
            if !codes.insert(c.code.as_str()) {
                return Err(CoreError::validation(format!("duplicate class code {:?}", c.code)));
            }
        }
        if self.noise_mv < 0.0 {
            return Err(CoreError::validation("noise level must be non-negative"));
        }
        Ok(())
    }

    /// Class list: normal first, then abnormal classes in declared order.
    pub fn class_list(&self) -> Vec<String> {
        let mut classes = vec![self.normal_class.clone()];
        classes.extend(self.abnormal_classes.iter().map(|c| c.code.clone()));
        classes
    }
}

/// Fixed 12×2 projection of the two beat-source components onto the leads.
/// Rows are pairwise distinct, so every lead is a different mixture.
const LEAD_PROJECTION: [[f64; 2]; 12] = [
    [1.00, 0.10],  // I
    [0.90, 0.45],  // II
    [-0.10, 0.35], // III
    [-0.95, -0.28], // aVR
    [0.55, -0.13], // aVL
    [0.40, 0.40],  // aVF
    [-0.35, 0.70], // V1
    [0.15, 1.00],  // V2
    [0.55, 0.95],  // V3
    [0.85, 0.80],  // V4
    [1.00, 0.55],  // V5
    [1.05, 0.30],  // V6
];

/// One Gaussian bump.
fn bump(t: f64, center: f64, width: f64, height: f64) -> f64 {
    let z = (t - center) / width;
    height * (-0.5 * z * z).exp()
}

/// Two-component beat template sampled at phase `p` in [0, 1): a sharp
/// QRS-like complex and a slow P/T-like wave.
fn beat_template(p: f64) -> (f64, f64) {
    let qrs = bump(p, 0.30, 0.018, 1.0) - bump(p, 0.265, 0.012, 0.25) - bump(p, 0.335, 0.014, 0.30);
    let pt = bump(p, 0.16, 0.045, 0.18) + bump(p, 0.55, 0.09, 0.32);
    (qrs, pt)
}

/// Deterministically generate one record's 12-lead signal.
///
/// `rate_factor` multiplies the subject's base beat rate, `amp_factor` the
/// template amplitude; `lead_gain` scales selected rows; `osc` adds a
/// sinusoid to all leads.
#[allow(clippy::too_many_arguments)]
fn synth_signal(
    rng: &mut RngStream,
    fs: f64,
    n_samples: usize,
    base_rate_hz: f64,
    rate_factor: f64,
    amp_factor: f64,
    lead_gain: &[(usize, f64)],
    osc: &[(f64, f64)],
    noise_mv: f64,
) -> Array2<f64> {
    let rate = base_rate_hz * rate_factor;
    // Small per-beat jitter makes peaks non-grid-aligned but stays
    // deterministic in the stream.
    let mut beat_starts = Vec::new();
    let total_s = n_samples as f64 / fs;
    let mut t0 = rng.uniform(0.0, 0.3 / rate);
    while t0 < total_s + 1.0 / rate {
        beat_starts.push(t0);
        let jitter = rng.uniform(0.97, 1.03);
        t0 += jitter / rate;
    }
    let mut u = vec![0.0f64; n_samples];
    let mut v = vec![0.0f64; n_samples];
    for &start in &beat_starts {
        let period = 1.0 / rate;
        let lo = ((start - 0.1 * period) * fs).floor().max(0.0) as usize;
        let hi = (((start + 1.1 * period) * fs).ceil() as usize).min(n_samples);
        for i in lo..hi {
            let p = (i as f64 / fs - start) / period;
            if (-0.05..1.05).contains(&p) {
                let (q, s) = beat_template(p);
                u[i] += amp_factor * q;
                v[i] += amp_factor * s;
            }
        }
    }
    let mut samples = Array2::<f64>::zeros((12, n_samples));
    for (c, proj) in LEAD_PROJECTION.iter().enumerate() {
        let gain = lead_gain
            .iter()
            .find(|(lc, _)| *lc == c)
            .map(|&(_, g)| g)
            .unwrap_or(1.0);
        for i in 0..n_samples {
            let t = i as f64 / fs;
            let mut val = gain * (proj[0] * u[i] + proj[1] * v[i]);
            for &(freq, amp) in osc {
                val += amp * (2.0 * std::f64::consts::PI * freq * t).sin();
            }
            val += rng.normal(0.0, noise_mv);
            // Store at single precision so ECGW round-trips bit-exactly.
            samples[(c, i)] = val as f32 as f64;
        }
    }
    samples
}

/// Generate a synthetic dataset under `out_dir` and return its manifest
/// (also saved as `out_dir/manifest.json`; signals under `out_dir/records/`).
///
/// Byte-identical across runs for the same config and seed.
pub fn synth_dataset(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let records_dir = out_dir.join("records");
    fs::create_dir_all(&records_dir).map_err(|source| CoreError::io(&records_dir, source))?;
    let n_samples = (config.duration_s * config.fs).round() as usize;
    let mut entries = Vec::new();
    for si in 0..config.n_subjects {
        let subject_id = format!("subj{si:04}");
        // Subject traits: base heart rate and a stable amplitude trait.
        let mut subj_rng = RngStream::from_seed(seed).child(purpose::SYNTH, &[si as u64]);
        let base_rate_hz = subj_rng.uniform(55.0, 75.0) / 60.0;
        let subj_amp = subj_rng.uniform(0.9, 1.1);
        for ri in 0..config.records_per_subject {
            let record_id = format!("{subject_id}_rec{ri:02}");
            let mut label_rng =
                RngStream::from_seed(seed).child(purpose::SYNTH, &[si as u64, ri as u64, 1]);
            let mut labels = Vec::new();
            let mut rate_factor = 1.0;
            let mut amp_factor = subj_amp;
            let mut lead_gain: Vec<(usize, f64)> = Vec::new();
            let mut osc: Vec<(f64, f64)> = Vec::new();
            for class in &config.abnormal_classes {
                if label_rng.uniform(0.0, 1.0) < config.abnormal_prob {
                    labels.push(class.code.clone());
                    match &class.effect {
                        ClassEffect::BeatRate { factor } => rate_factor *= factor,
                        ClassEffect::Amplitude { factor } => amp_factor *= factor,
                        ClassEffect::LeadGain { leads, gain } => {
                            for l in leads {
                                lead_gain.push((l.tag() as usize, *gain));
                            }
                        }
                        ClassEffect::Oscillation { freq_hz, amplitude } => {
                            osc.push((*freq_hz, *amplitude));
                        }
                    }
                }
            }
            if labels.is_empty() {
                labels.push(config.normal_class.clone());
            }
            let mut sig_rng =
                RngStream::from_seed(seed).child(purpose::SYNTH, &[si as u64, ri as u64, 2]);
            let samples = synth_signal(
                &mut sig_rng,
                config.fs,
                n_samples,
                base_rate_hz,
                rate_factor,
                amp_factor,
                &lead_gain,
                &osc,
                config.noise_mv,
            );
            let record = EcgRecord {
                subject_id: subject_id.clone(),
                record_id: record_id.clone(),
                fs: config.fs,
                leads: LeadId::ALL.to_vec(),
                samples,
                labels: labels.clone(),
            };
            let rel_path = format!("records/{record_id}.ecgw");
            write_record(&record, &out_dir.join(&rel_path))?;
            entries.push(ManifestEntry {
                subject_id: subject_id.clone(),
                record_id,
                path: rel_path,
                n_leads: 12,
                n_samples,
                fs: config.fs,
                labels,
                source: Some("synthetic".to_string()),
            });
        }
    }
    let manifest = DatasetManifest {
        classes: config.class_list(),
        provenance: format!(
            "synthetic generator: seed {seed}, {} subjects x {} records, fs {} Hz, {} s",
            config.n_subjects, config.records_per_subject, config.fs, config.duration_s
        ),
        records: entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Resolve a manifest path that may point at the file or its directory.
pub fn manifest_path(dir_or_file: &Path) -> PathBuf {
    if dir_or_file.is_dir() {
        dir_or_file.join("manifest.json")
    } else {
        dir_or_file.to_path_buf()
    }
}

// --------------------------------------------------------------- window bank

/// Identity and labels for one preprocessed window; the waveform lives in
/// the ECGW file at `path` (relative to the bank directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowMeta {
    pub path: String,
    pub subject_id: String,
    pub record_id: String,
    pub window_index: usize,
    pub labels: Vec<String>,
}

/// Index of a directory of preprocessed fixed-length windows
/// (`windows.json` plus one ECGW file per window). All windows share the
/// sampling rate, length, and lead layout recorded here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowBank {
    pub fs: f64,
    pub window_len: usize,
    pub leads: Vec<LeadId>,
    pub entries: Vec<WindowMeta>,
}

impl WindowBank {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(CoreError::validation(format!(
                "window bank sampling rate must be positive, got {}",
                self.fs
            )));
        }
        if self.window_len == 0 {
            return Err(CoreError::validation("window length must be positive".to_string()));
        }
        if self.leads.is_empty() {
            return Err(CoreError::validation("window bank declares no leads".to_string()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.entries {
            if entry.path.is_empty() {
                return Err(CoreError::validation("window entry with empty path".to_string()));
            }
            if !seen.insert(entry.path.as_str()) {
                return Err(CoreError::validation(format!(
                    "duplicate window path {}",
                    entry.path
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct label codes appearing in the bank, sorted.
    pub fn label_codes(&self) -> Vec<String> {
        let mut set = std::collections::BTreeSet::new();
        for entry in &self.entries {
            for label in &entry.labels {
                set.insert(label.clone());
            }
        }
        set.into_iter().collect()
    }
}

/// A window bank together with every waveform loaded into memory, in entry
/// order. This is the in-memory dataset the training loops consume.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub bank: WindowBank,
    pub data: Vec<Array2<f64>>,
}

impl WindowDataset {
    /// Build an in-memory dataset from freshly produced windows, which must
    /// agree on rate, length, and lead layout.
    pub fn from_windows(windows: Vec<Window>) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| CoreError::validation("cannot build a dataset from zero windows".to_string()))?;
        let fs = first.fs;
        let window_len = first.n_samples();
        let leads = first.leads.clone();
        let mut entries = Vec::with_capacity(windows.len());
        let mut data = Vec::with_capacity(windows.len());
        for (i, w) in windows.into_iter().enumerate() {
            w.validate()?;
            if w.fs != fs || w.n_samples() != window_len || w.leads != leads {
                return Err(CoreError::validation(format!(
                    "window {i} disagrees with the bank layout (fs {} vs {fs}, len {} vs {window_len})",
                    w.fs,
                    w.n_samples()
                )));
            }
            entries.push(WindowMeta {
                path: format!("windows/{i:06}.ecgw"),
                subject_id: w.subject_id,
                record_id: w.record_id,
                window_index: w.window_index,
                labels: w.labels,
            });
            data.push(w.samples);
        }
        let bank = WindowBank {
            fs,
            window_len,
            leads,
            entries,
        };
        bank.validate()?;
        Ok(Self { bank, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Write `windows.json` plus one ECGW file per window under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.bank.validate()?;
        if self.bank.entries.len() != self.data.len() {
            return Err(CoreError::validation(format!(
                "bank lists {} windows but {} waveforms are loaded",
                self.bank.entries.len(),
                self.data.len()
            )));
        }
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.to_path_buf(), e))?;
        for (entry, samples) in self.bank.entries.iter().zip(&self.data) {
            let record = EcgRecord {
                subject_id: entry.subject_id.clone(),
                record_id: entry.record_id.clone(),
                fs: self.bank.fs,
                leads: self.bank.leads.clone(),
                samples: samples.clone(),
                labels: entry.labels.clone(),
            };
            write_record(&record, &dir.join(&entry.path))?;
        }
        let json_path = dir.join("windows.json");
        let body = serde_json::to_vec_pretty(&self.bank)?;
        let tmp = json_path.with_extension("json.tmp");
        fs::write(&tmp, &body).map_err(|e| CoreError::io(tmp.clone(), e))?;
        fs::rename(&tmp, &json_path).map_err(|e| CoreError::io(json_path.clone(), e))?;
        Ok(())
    }

    /// Load a bank saved by [`WindowDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let json_path = dir.join("windows.json");
        let bytes = fs::read(&json_path).map_err(|e| CoreError::io(json_path.clone(), e))?;
        let bank: WindowBank = serde_json::from_slice(&bytes)?;
        bank.validate()?;
        let mut data = Vec::with_capacity(bank.entries.len());
        for entry in &bank.entries {
            let path = dir.join(&entry.path);
            let record = read_record(&path)?;
            if record.n_samples() != bank.window_len
                || record.fs != bank.fs
                || record.leads != bank.leads
            {
                return Err(CoreError::format(
                    path,
                    "window file disagrees with the bank layout".to_string(),
                ));
            }
            data.push(record.samples);
        }
        Ok(Self { bank, data })
    }
}
