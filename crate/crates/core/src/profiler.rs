//! Resource-efficiency measurement: a counting global allocator, a
//! resident-set sampler, peak-memory and per-epoch wall-time measurement of
//! training workloads, an analytic activation budget, and the
//! channel-adaptive versus zero-padded comparison with its CSV/markdown
//! reports.
//!
//! Measurement conventions: the host peak is reported as the growth above a
//! pre-run baseline, taken as the larger of (a) the heap high-water mark from
//! [`CountingAllocator`] when it is installed as the global allocator and
//! (b) resident-set samples read from `/proc/self/status` at roughly 200 Hz.
//! Workloads shorter than one sampling interval (~5 ms) are covered by the
//! allocator hook alone. The documented measurement-noise bound for an empty
//! workload is 1 MiB. There is no accelerator, so accelerator peaks are 0.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::finetune::{assemble_supervised_batch, lead_rows, parse_leadset, InputMode};
use crate::model::{
    backbone_forward, classify, init_params, AdamConfig, AdamState, ModelConfig,
};
use crate::rng::{purpose, RngStream};
use crate::signal_io::WindowDataset;
use crate::tensor::Graph;

// -------------------------------------------------------- counting allocator

static ALLOC_CURRENT: AtomicUsize = AtomicUsize::new(0);
static ALLOC_PEAK: AtomicUsize = AtomicUsize::new(0);

/// System-allocator wrapper that tracks live bytes and their high-water
/// mark. Install it in a binary with
/// `#[global_allocator] static A: CountingAllocator = CountingAllocator;`
/// to give [`measure_peak_memory`] exact heap peaks; without it the
/// measurement falls back to resident-set sampling.
pub struct CountingAllocator;

impl CountingAllocator {
    /// Live heap bytes right now (0 when not installed).
    pub fn current_bytes() -> usize {
        ALLOC_CURRENT.load(Ordering::Relaxed)
    }

    /// High-water mark since the last [`CountingAllocator::reset_peak`].
    pub fn peak_bytes() -> usize {
        ALLOC_PEAK.load(Ordering::Relaxed)
    }

    /// Restart peak tracking from the current live size.
    pub fn reset_peak() {
        ALLOC_PEAK.store(ALLOC_CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    fn add(bytes: usize) {
        let now = ALLOC_CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
        ALLOC_PEAK.fetch_max(now, Ordering::Relaxed);
    }

    fn remove(bytes: usize) {
        ALLOC_CURRENT.fetch_sub(bytes, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            Self::add(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        Self::remove(layout.size());
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            Self::add(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            Self::remove(layout.size());
            Self::add(new_size);
        }
        p
    }
}

// ------------------------------------------------------------- RSS sampling

/// Resident-set size of this process in bytes, from `/proc/self/status`.
pub fn read_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmRSS:") {
            let kb: u64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

/// Background thread sampling the resident set at ~200 Hz, tracking the
/// maximum seen.
struct RssSampler {
    stop: Arc<AtomicBool>,
    handle: std::thread::JoinHandle<u64>,
    baseline: u64,
}

impl RssSampler {
    fn start() -> Self {
        let baseline = read_rss_bytes().unwrap_or(0);
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let mut max = 0u64;
            while !flag.load(Ordering::Relaxed) {
                if let Some(rss) = read_rss_bytes() {
                    max = max.max(rss);
                }
                std::thread::sleep(std::time::Duration::from_millis(5));
            }
            max
        });
        Self {
            stop,
            handle,
            baseline,
        }
    }

    /// Returns (baseline, maximum sample).
    fn stop(self) -> (u64, u64) {
        self.stop.store(true, Ordering::Relaxed);
        let sampled = self.handle.join().unwrap_or(0);
        let last = read_rss_bytes().unwrap_or(0);
        (self.baseline, sampled.max(last))
    }
}

// ------------------------------------------------------------- measurements

/// Memory growth of one measured workload, above its pre-run baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakMemory {
    /// Resident-set growth seen by the sampler.
    pub rss_bytes: u64,
    /// Heap growth seen by the counting allocator (0 when not installed).
    pub alloc_bytes: u64,
    /// Device allocator high-water mark; no accelerator here, so always 0.
    pub accelerator_bytes: u64,
}

impl PeakMemory {
    /// Best available host-side peak.
    pub fn host_peak(&self) -> u64 {
        self.rss_bytes.max(self.alloc_bytes)
    }
}

/// Run `workload` once and report its memory growth. Concurrent allocation
/// on other threads is attributed to the workload, so measured sections
/// must not overlap.
pub fn measure_peak_memory<R>(workload: impl FnOnce() -> Result<R>) -> Result<(PeakMemory, R)> {
    let alloc_baseline = CountingAllocator::current_bytes();
    CountingAllocator::reset_peak();
    let sampler = RssSampler::start();
    let out = workload();
    let (rss_baseline, rss_max) = sampler.stop();
    let alloc_peak = CountingAllocator::peak_bytes();
    let value = out?;
    Ok((
        PeakMemory {
            rss_bytes: rss_max.saturating_sub(rss_baseline),
            alloc_bytes: alloc_peak.saturating_sub(alloc_baseline) as u64,
            accelerator_bytes: 0,
        },
        value,
    ))
}

/// Wall-time statistics over measured epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub mean_s: f64,
    pub std_s: f64,
    pub samples: Vec<f64>,
}

/// Time `epoch(i)` per call. The closure runs `n_epochs + 1` times; the
/// first call (index 0) is a warm-up excluded from the statistics, and the
/// sample standard deviation uses the n−1 denominator.
pub fn measure_epoch_time(
    mut epoch: impl FnMut(usize) -> Result<()>,
    n_epochs: usize,
) -> Result<EpochTiming> {
    if n_epochs < 3 {
        return Err(CoreError::validation(format!(
            "time statistics need at least 3 measured epochs, got {n_epochs}"
        )));
    }
    epoch(0)?;
    let mut samples = Vec::with_capacity(n_epochs);
    for i in 1..=n_epochs {
        let t0 = Instant::now();
        epoch(i)?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
        / (samples.len() - 1) as f64;
    Ok(EpochTiming {
        mean_s: mean,
        std_s: var.sqrt(),
        samples,
    })
}

// -------------------------------------------------------- analytic activations

/// Activation element counts split into the channel-dependent convolutional
/// front end and the channel-independent remainder, with f32 byte totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationBudget {
    pub conv_elements: usize,
    pub transformer_elements: usize,
    pub conv_bytes: usize,
    pub transformer_bytes: usize,
    pub total_bytes: usize,
    /// Labeled per-row element counts, in forward order.
    pub rows: Vec<(String, usize)>,
}

const F32_BYTES: usize = 4;

/// Sum the output-element counts of every layer at input shape `(b, c, t)`,
/// at 4 bytes per element. Counting rule for the front end: the stage-1
/// convolution output is counted once, its normalization + activation
/// output once, then each later stage's output once — so the subtotal is
/// `F·C·B·(t1 + t1 + t2 + t3 + t4)` and is exactly linear in both B and C.
/// Everything after the adaptive pooling has no channel dimension.
pub fn analytic_activation_bytes(
    config: &ModelConfig,
    b: usize,
    c: usize,
    t: usize,
) -> Result<ActivationBudget> {
    config.validate()?;
    if b == 0 || c == 0 {
        return Err(CoreError::validation("batch and channel counts must be positive".to_string()));
    }
    if t < 16 {
        return Err(CoreError::validation(format!(
            "window length {t} is shorter than the 16-sample minimum"
        )));
    }
    let f = config.conv_channels;
    let l = config.dap_out_len;
    let d = config.embed_dim;
    let ffn = config.ffn_dim;
    let heads = config.n_heads;

    let mut lens = Vec::with_capacity(4);
    let mut cur = t;
    for _ in 0..4 {
        cur /= 2;
        lens.push(cur);
    }
    let mut rows: Vec<(String, usize)> = Vec::new();
    rows.push(("conv_stage1".to_string(), b * f * c * lens[0]));
    rows.push(("conv_stage1_norm_act".to_string(), b * f * c * lens[0]));
    rows.push(("conv_stage2".to_string(), b * f * c * lens[1]));
    rows.push(("conv_stage3".to_string(), b * f * c * lens[2]));
    rows.push(("conv_stage4".to_string(), b * f * c * lens[3]));
    let conv_elements: usize = rows.iter().map(|(_, n)| n).sum();

    let mut tail: Vec<(String, usize)> = vec![
        ("adaptive_pool".to_string(), b * f * l),
        ("pre_embed_norm".to_string(), b * l * f),
        ("embed".to_string(), b * l * d),
        ("positional_conv".to_string(), b * d * l),
        ("positional_norm".to_string(), b * l * d),
    ];
    for i in 0..config.n_blocks {
        tail.push((format!("block{i}_qkv"), 3 * b * l * d));
        tail.push((format!("block{i}_attn_probs"), b * heads * l * l));
        tail.push((format!("block{i}_attn_out"), b * l * d));
        tail.push((format!("block{i}_attn_norm"), b * l * d));
        tail.push((format!("block{i}_ffn_hidden"), b * l * ffn));
        tail.push((format!("block{i}_ffn_out"), b * l * d));
        tail.push((format!("block{i}_ffn_norm"), b * l * d));
    }
    let transformer_elements: usize = tail.iter().map(|(_, n)| n).sum();
    rows.extend(tail);

    Ok(ActivationBudget {
        conv_elements,
        transformer_elements,
        conv_bytes: conv_elements * F32_BYTES,
        transformer_bytes: transformer_elements * F32_BYTES,
        total_bytes: (conv_elements + transformer_elements) * F32_BYTES,
        rows,
    })
}

// ----------------------------------------------------------- mode comparison

/// One measured configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub leadset: String,
    pub input_mode: InputMode,
    pub host_peak_bytes: u64,
    pub accel_peak_bytes: u64,
    pub epoch_time_mean_s: f64,
    pub epoch_time_std_s: f64,
    /// (ZP − DAP)/ZP × 100 for the host peak; only on channel-adaptive rows.
    pub saving_percent_memory: Option<f64>,
    /// (ZP − DAP)/ZP × 100 for the epoch-time mean; only on channel-adaptive rows.
    pub saving_percent_time: Option<f64>,
}

/// Shape of the measured training segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileWorkloadSpec {
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Measured epochs for the time statistics (≥ 3); one extra warm-up
    /// epoch runs first and one more epoch is measured for memory.
    pub n_epochs: usize,
    pub seed: u64,
}

impl ProfileWorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(CoreError::validation(
                "batch size and batches per epoch must be positive".to_string(),
            ));
        }
        if self.n_epochs < 3 {
            return Err(CoreError::validation(format!(
                "need at least 3 measured epochs, got {}",
                self.n_epochs
            )));
        }
        Ok(())
    }
}

/// Fine-tuning-shaped workload for one (leadset, mode): deterministic
/// sequential batches, full forward + loss + backward + optimizer step.
struct TrainingSegment<'a> {
    data: &'a WindowDataset,
    class_list: Vec<String>,
    rows: Vec<usize>,
    leads: Vec<crate::signal_io::LeadId>,
    input_mode: InputMode,
    model_config: &'a ModelConfig,
    spec: ProfileWorkloadSpec,
    store: crate::model::ParameterStore<f32>,
    adam: AdamState<f32>,
    cursor: usize,
}

impl<'a> TrainingSegment<'a> {
    fn new(
        data: &'a WindowDataset,
        class_list: &[String],
        model_config: &'a ModelConfig,
        leadset_spec: &str,
        input_mode: InputMode,
        spec: ProfileWorkloadSpec,
    ) -> Result<Self> {
        let leads = parse_leadset(leadset_spec)?;
        let rows = lead_rows(&data.bank.leads, &leads)?;
        let mut rng = RngStream::from_seed(spec.seed).child(purpose::INIT, &[0]);
        let store = init_params::<f32>(model_config, Some(class_list.len()), &mut rng)?;
        let adam = AdamState::new(AdamConfig::default(), &store);
        Ok(Self {
            data,
            class_list: class_list.to_vec(),
            rows,
            leads,
            input_mode,
            model_config,
            spec,
            store,
            adam,
            cursor: 0,
        })
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<()> {
        let mut drop_rng =
            RngStream::from_seed(self.spec.seed).child(purpose::DROPOUT, &[epoch as u64]);
        for _ in 0..self.spec.batches_per_epoch {
            let indices: Vec<usize> = (0..self.spec.batch_size)
                .map(|i| (self.cursor + i) % self.data.len())
                .collect();
            self.cursor = (self.cursor + self.spec.batch_size) % self.data.len();
            let (x, y) = assemble_supervised_batch(
                self.data,
                &indices,
                &self.rows,
                &self.leads,
                self.input_mode,
                &self.class_list,
            )?;
            let graph = Graph::<f32>::new();
            graph.set_train(true);
            let input = graph.constant(x);
            let tokens =
                backbone_forward(&graph, &self.store, &input, self.model_config, &mut drop_rng)?;
            let probs = classify(&graph, &self.store, &tokens)?;
            let loss = probs.bce_probs(&y);
            let grads = graph.backward(&loss);
            self.adam.step(&mut self.store, &grads, 1e-5)?;
        }
        Ok(())
    }
}

/// Measure one (leadset, mode) configuration: per-epoch wall time over
/// `n_epochs` measured epochs (after a warm-up) and the peak memory of one
/// further epoch.
pub fn profile_configuration(
    data: &WindowDataset,
    class_list: &[String],
    model_config: &ModelConfig,
    leadset_spec: &str,
    input_mode: InputMode,
    spec: ProfileWorkloadSpec,
) -> Result<ProfileReport> {
    spec.validate()?;
    if data.is_empty() {
        return Err(CoreError::validation("empty dataset".to_string()));
    }
    let mut segment = TrainingSegment::new(
        data,
        class_list,
        model_config,
        leadset_spec,
        input_mode,
        spec,
    )?;
    let timing = measure_epoch_time(|i| segment.run_epoch(i), spec.n_epochs)?;
    let (memory, _) = measure_peak_memory(|| segment.run_epoch(spec.n_epochs + 1))?;
    Ok(ProfileReport {
        leadset: leadset_spec.to_string(),
        input_mode,
        host_peak_bytes: memory.host_peak(),
        accel_peak_bytes: memory.accelerator_bytes,
        epoch_time_mean_s: timing.mean_s,
        epoch_time_std_s: timing.std_s,
        saving_percent_memory: None,
        saving_percent_time: None,
    })
}

fn saving_percent(reference: f64, measured: f64) -> f64 {
    if reference == 0.0 {
        0.0
    } else {
        (reference - measured) / reference * 100.0
    }
}

/// Profile every leadset in both input modes on identical data, seeds, and
/// epoch plans, then annotate each channel-adaptive row with its savings
/// relative to the zero-padded run of the same leadset. Returns two reports
/// per leadset, zero-padded first.
pub fn compare_zp_vs_dap(
    data: &WindowDataset,
    class_list: &[String],
    model_config: &ModelConfig,
    leadsets: &[String],
    spec: ProfileWorkloadSpec,
) -> Result<Vec<ProfileReport>> {
    if leadsets.is_empty() {
        return Err(CoreError::validation("no leadsets to profile".to_string()));
    }
    let mut reports = Vec::with_capacity(leadsets.len() * 2);
    for leadset in leadsets {
        let zp = profile_configuration(
            data,
            class_list,
            model_config,
            leadset,
            InputMode::ZeroPad,
            spec,
        )?;
        let mut dap = profile_configuration(
            data,
            class_list,
            model_config,
            leadset,
            InputMode::Dap,
            spec,
        )?;
        dap.saving_percent_memory = Some(saving_percent(
            zp.host_peak_bytes as f64,
            dap.host_peak_bytes as f64,
        ));
        dap.saving_percent_time = Some(saving_percent(zp.epoch_time_mean_s, dap.epoch_time_mean_s));
        reports.push(zp);
        reports.push(dap);
    }
    Ok(reports)
}

// ------------------------------------------------------------------- reports

fn mode_name(mode: InputMode) -> &'static str {
    match mode {
        InputMode::Dap => "dap",
        InputMode::ZeroPad => "zero_pad",
    }
}

/// `profile.csv`: one row per measured configuration.
pub fn write_profile_csv(path: &Path, reports: &[ProfileReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
    writer
        .write_record([
            "leadset",
            "mode",
            "host_peak_bytes",
            "accel_peak_bytes",
            "epoch_time_mean_s",
            "epoch_time_std_s",
            "saving_percent_memory",
            "saving_percent_time",
        ])
        .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
    for r in reports {
        writer
            .write_record([
                r.leadset.as_str(),
                mode_name(r.input_mode),
                &r.host_peak_bytes.to_string(),
                &r.accel_peak_bytes.to_string(),
                &format!("{:.6}", r.epoch_time_mean_s),
                &format!("{:.6}", r.epoch_time_std_s),
                &r.saving_percent_memory
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_default(),
                &r.saving_percent_time
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_default(),
            ])
            .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| CoreError::io(path.to_path_buf(), e))?;
    Ok(())
}

fn find<'a>(
    reports: &'a [ProfileReport],
    leadset: &str,
    mode: InputMode,
) -> Option<&'a ProfileReport> {
    reports
        .iter()
        .find(|r| r.leadset == leadset && r.input_mode == mode)
}

/// Markdown tables: one for peak memory, one for epoch time; leadset per
/// column, zero-padded and channel-adaptive rows plus the saving row.
/// Missing cells render as "—".
pub fn write_profile_markdown(path: &Path, reports: &[ProfileReport]) -> Result<()> {
    let mut leadsets: Vec<String> = Vec::new();
    for r in reports {
        if !leadsets.contains(&r.leadset) {
            leadsets.push(r.leadset.clone());
        }
    }
    let mb = |bytes: u64| format!("{:.2}", bytes as f64 / 1e6);
    let mut out = String::new();
    out.push_str("# Resource profile: zero-padded vs channel-adaptive\n\n");
    out.push_str("## Peak host memory (MB above baseline)\n\n");
    out.push_str(&format!("| mode | {} |\n", leadsets.join(" leads | ")));
    out.push_str(&format!("|---|{}\n", "---|".repeat(leadsets.len())));
    for (label, mode) in [("zero_pad", InputMode::ZeroPad), ("dap", InputMode::Dap)] {
        let cells: Vec<String> = leadsets
            .iter()
            .map(|ls| {
                find(reports, ls, mode)
                    .map(|r| mb(r.host_peak_bytes))
                    .unwrap_or_else(|| "—".to_string())
            })
            .collect();
        out.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
    }
    let mem_savings: Vec<String> = leadsets
        .iter()
        .map(|ls| {
            find(reports, ls, InputMode::Dap)
                .and_then(|r| r.saving_percent_memory)
                .map(|v| format!("{v:.2}%"))
                .unwrap_or_else(|| "—".to_string())
        })
        .collect();
    out.push_str(&format!("| saving | {} |\n", mem_savings.join(" | ")));

    out.push_str("\n## Epoch time (seconds, mean ± std)\n\n");
    out.push_str(&format!("| mode | {} |\n", leadsets.join(" leads | ")));
    out.push_str(&format!("|---|{}\n", "---|".repeat(leadsets.len())));
    for (label, mode) in [("zero_pad", InputMode::ZeroPad), ("dap", InputMode::Dap)] {
        let cells: Vec<String> = leadsets
            .iter()
            .map(|ls| {
                find(reports, ls, mode)
                    .map(|r| format!("{:.3} ± {:.3}", r.epoch_time_mean_s, r.epoch_time_std_s))
                    .unwrap_or_else(|| "—".to_string())
            })
            .collect();
        out.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
    }
    let time_savings: Vec<String> = leadsets
        .iter()
        .map(|ls| {
            find(reports, ls, InputMode::Dap)
                .and_then(|r| r.saving_percent_time)
                .map(|v| format!("{v:.2}%"))
                .unwrap_or_else(|| "—".to_string())
        })
        .collect();
    out.push_str(&format!("| saving | {} |\n", time_savings.join(" | ")));
    std::fs::write(path, out).map_err(|e| CoreError::io(path.to_path_buf(), e))?;
    Ok(())
}
