//! Resource measurement: counting-allocator and RSS probes, wall-time
//! statistics with warm-up exclusion (sleep-mock calibrated), the analytic
//! activation budget and its channel-scaling laws, and the zero-padded
//! versus channel-adaptive comparison with its report files.

use std::sync::Mutex;
use std::time::Duration;

use ndarray::Array2;
use selfdana_core::finetune::InputMode;
use selfdana_core::model::ModelConfig;
use selfdana_core::profiler::{
    analytic_activation_bytes, compare_zp_vs_dap, measure_epoch_time, measure_peak_memory,
    read_rss_bytes, write_profile_csv, write_profile_markdown, CountingAllocator, ProfileReport,
    ProfileWorkloadSpec,
};
use selfdana_core::rng::{purpose, RngStream};
use selfdana_core::signal_io::{LeadId, Window, WindowDataset};

#[global_allocator]
static COUNTING: CountingAllocator = CountingAllocator;

/// Allocation counters are process-global, so measured sections must not
/// overlap; every test that measures takes this guard.
static MEASURE_GUARD: Mutex<()> = Mutex::new(());

fn guard() -> std::sync::MutexGuard<'static, ()> {
    MEASURE_GUARD.lock().unwrap_or_else(|e| e.into_inner())
}

fn small_dataset(n: usize, t: usize, seed: u64) -> WindowDataset {
    let mut rng = RngStream::from_seed(seed).child(purpose::SYNTH, &[0]);
    let windows = (0..n)
        .map(|i| Window {
            subject_id: format!("s{i}"),
            record_id: format!("r{i}"),
            window_index: 0,
            fs: 64.0,
            leads: LeadId::ALL.to_vec(),
            samples: Array2::from_shape_fn((12, t), |_| rng.normal(0.0, 1.0)),
            labels: vec![if i % 2 == 0 { "even" } else { "odd" }.to_string()],
        })
        .collect();
    WindowDataset::from_windows(windows).unwrap()
}

// ------------------------------------------------------------------- timing

#[test]
fn sleep_mock_calibrates_epoch_timing() {
    let timing = measure_epoch_time(
        |_| {
            std::thread::sleep(Duration::from_millis(100));
            Ok(())
        },
        3,
    )
    .unwrap();
    assert!(
        (timing.mean_s - 0.1).abs() <= 0.01,
        "mean {} outside 0.1 ± 0.01",
        timing.mean_s
    );
    assert!(timing.std_s <= 0.01, "std {}", timing.std_s);
    assert_eq!(timing.samples.len(), 3);
}

#[test]
fn warm_up_epoch_is_excluded_from_the_statistics() {
    let timing = measure_epoch_time(
        |i| {
            std::thread::sleep(Duration::from_millis(if i == 0 { 250 } else { 30 }));
            Ok(())
        },
        3,
    )
    .unwrap();
    assert!(
        timing.mean_s > 0.025 && timing.mean_s < 0.06,
        "mean {} should reflect only the 30 ms epochs",
        timing.mean_s
    );
}

#[test]
fn fewer_than_three_epochs_is_rejected() {
    assert!(measure_epoch_time(|_| Ok(()), 2).is_err());
    let mut calls = 0;
    let t = measure_epoch_time(
        |_| {
            calls += 1;
            Ok(())
        },
        3,
    );
    assert!(t.is_ok());
    assert_eq!(calls, 4, "three measured epochs plus one warm-up");
}

// ------------------------------------------------------------------- memory

#[test]
fn counting_allocator_sees_a_large_allocation() {
    let _g = guard();
    let (peak, len) = measure_peak_memory(|| {
        let v = vec![1u8; 8 << 20];
        let len = v.len();
        std::hint::black_box(&v);
        Ok(len)
    })
    .unwrap();
    assert_eq!(len, 8 << 20);
    assert!(
        peak.alloc_bytes >= (8 << 20) as u64,
        "allocator peak {} below the 8 MiB allocation",
        peak.alloc_bytes
    );
    assert_eq!(peak.accelerator_bytes, 0);
}

#[test]
fn empty_workload_stays_within_the_noise_bound() {
    let _g = guard();
    let (peak, _) = measure_peak_memory(|| Ok(())).unwrap();
    assert!(
        peak.alloc_bytes <= 1 << 20,
        "empty workload grew the heap by {} bytes",
        peak.alloc_bytes
    );
}

#[test]
fn rss_probe_reads_a_positive_resident_set() {
    let rss = read_rss_bytes().expect("proc status readable");
    assert!(rss > 1 << 20, "resident set {rss} implausibly small");
}

// -------------------------------------------------------------- analytic law

#[test]
fn conv_budget_is_exactly_linear_in_channels_and_batch() {
    let config = ModelConfig::full();
    let one = analytic_activation_bytes(&config, 1, 1, 2500).unwrap();
    let twelve = analytic_activation_bytes(&config, 1, 12, 2500).unwrap();
    // Stage lengths 1250, 625, 312, 156 with the first counted twice.
    let per_channel = 256 * (1250 + 1250 + 625 + 312 + 156);
    assert_eq!(one.conv_elements, per_channel);
    assert_eq!(twelve.conv_elements, 12 * per_channel);
    assert_eq!(one.conv_elements * 12, twelve.conv_elements, "exact 1/12 ratio");
    assert_eq!(
        one.transformer_elements, twelve.transformer_elements,
        "everything after pooling has no channel dimension"
    );
    let doubled = analytic_activation_bytes(&config, 2, 1, 2500).unwrap();
    assert_eq!(doubled.conv_elements, 2 * one.conv_elements);
    assert_eq!(doubled.transformer_elements, 2 * one.transformer_elements);
    assert_eq!(doubled.total_bytes, 2 * one.total_bytes);
    assert_eq!(one.conv_bytes, one.conv_elements * 4, "f32 accounting");
}

#[test]
fn adaptive_budget_beats_zero_padding_below_twelve_leads() {
    let config = ModelConfig::tiny();
    let zp = analytic_activation_bytes(&config, 4, 12, 192).unwrap();
    for c in [1usize, 2, 3, 6] {
        let dap = analytic_activation_bytes(&config, 4, c, 192).unwrap();
        assert!(
            dap.total_bytes < zp.total_bytes,
            "C={c}: {} vs zero-padded {}",
            dap.total_bytes,
            zp.total_bytes
        );
    }
    let same = analytic_activation_bytes(&config, 4, 12, 192).unwrap();
    assert_eq!(same.total_bytes, zp.total_bytes);
}

#[test]
fn analytic_budget_rejects_bad_shapes() {
    let config = ModelConfig::tiny();
    assert!(analytic_activation_bytes(&config, 0, 1, 192).is_err());
    assert!(analytic_activation_bytes(&config, 1, 0, 192).is_err());
    assert!(analytic_activation_bytes(&config, 1, 1, 8).is_err());
}

// -------------------------------------------------------- measured comparison

#[test]
fn zero_pad_vs_adaptive_comparison_measures_and_reports() {
    let _g = guard();
    let model = ModelConfig::tiny();
    let data = small_dataset(8, 192, 7);
    let classes: Vec<String> = vec!["even".into(), "odd".into()];
    let spec = ProfileWorkloadSpec {
        batch_size: 4,
        batches_per_epoch: 2,
        n_epochs: 3,
        seed: 0,
    };
    let leadsets: Vec<String> = vec!["1".into(), "12".into()];
    let reports = compare_zp_vs_dap(&data, &classes, &model, &leadsets, spec).unwrap();
    assert_eq!(reports.len(), 4, "two modes per leadset");
    let zp1 = &reports[0];
    let dap1 = &reports[1];
    let zp12 = &reports[2];
    let dap12 = &reports[3];
    assert_eq!(zp1.input_mode, InputMode::ZeroPad);
    assert_eq!(dap1.input_mode, InputMode::Dap);
    assert!(zp1.saving_percent_memory.is_none(), "reference rows carry no saving");
    assert!(dap1.saving_percent_memory.is_some());

    assert!(
        dap1.host_peak_bytes < zp1.host_peak_bytes,
        "single-lead adaptive {} should undercut zero-padded {}",
        dap1.host_peak_bytes,
        zp1.host_peak_bytes
    );
    assert!(dap1.saving_percent_memory.unwrap() > 0.0);

    let rel = (dap12.host_peak_bytes as f64 - zp12.host_peak_bytes as f64).abs()
        / zp12.host_peak_bytes as f64;
    assert!(
        rel <= 0.02,
        "12-lead peaks should agree within 2%: {} vs {}",
        dap12.host_peak_bytes,
        zp12.host_peak_bytes
    );

    // Memory measurements through the counting allocator are reproducible.
    let again = compare_zp_vs_dap(&data, &classes, &model, &leadsets, spec).unwrap();
    let s1 = reports[1].saving_percent_memory.unwrap();
    let s2 = again[1].saving_percent_memory.unwrap();
    assert!(
        (s1 - s2).abs() <= 5.0,
        "savings drifted between runs: {s1:.2}% vs {s2:.2}%"
    );

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("profile.csv");
    let md_path = dir.path().join("profile.md");
    write_profile_csv(&csv_path, &reports).unwrap();
    write_profile_markdown(&md_path, &reports).unwrap();
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "leadset,mode,host_peak_bytes,accel_peak_bytes,epoch_time_mean_s,epoch_time_std_s,saving_percent_memory,saving_percent_time"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,zero_pad,"));
    assert!(lines[2].starts_with("1,dap,"));
    let md = std::fs::read_to_string(&md_path).unwrap();
    assert!(md.contains("## Peak host memory"));
    assert!(md.contains("## Epoch time"));
    assert!(md.contains("| saving |"));
}

#[test]
fn markdown_report_marks_missing_cells() {
    let only_dap = vec![ProfileReport {
        leadset: "3".to_string(),
        input_mode: InputMode::Dap,
        host_peak_bytes: 1_000_000,
        accel_peak_bytes: 0,
        epoch_time_mean_s: 0.5,
        epoch_time_std_s: 0.01,
        saving_percent_memory: None,
        saving_percent_time: None,
    }];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.md");
    write_profile_markdown(&path, &only_dap).unwrap();
    let md = std::fs::read_to_string(&path).unwrap();
    assert!(md.contains("| zero_pad | — |"), "missing zero-padded cell:\n{md}");
    assert!(md.contains("| dap | 1.00 |"));
}

#[test]
fn workload_spec_is_validated() {
    let model = ModelConfig::tiny();
    let data = small_dataset(4, 192, 9);
    let classes: Vec<String> = vec!["even".into(), "odd".into()];
    let bad = ProfileWorkloadSpec {
        batch_size: 4,
        batches_per_epoch: 1,
        n_epochs: 2,
        seed: 0,
    };
    assert!(compare_zp_vs_dap(&data, &classes, &model, &["1".into()], bad).is_err());
    let none = ProfileWorkloadSpec {
        batch_size: 4,
        batches_per_epoch: 1,
        n_epochs: 3,
        seed: 0,
    };
    assert!(compare_zp_vs_dap(&data, &classes, &model, &[], none).is_err());
}
