//! Supervised adaptation: leadset parsing, epoch accounting, binary
//! cross-entropy anchors and a brute-force oracle, the class-balanced
//! hierarchical sampler (balance and chi-squared checks), input-mode
//! equivalence on the full leadset, the training loop (smoke, determinism,
//! artifacts), and checkpoint-initialized runs.

use ndarray::{Array2, ArrayD, IxDyn};
use selfdana_core::error::CoreError;
use selfdana_core::finetune::{
    attach_classify_head, balanced_batch, bank_hash, bce_loss, finetune, finetune_one_seed,
    multi_hot, parse_leadset, predict_probs, train_supervised, BalancedIndex, EpochPlan,
    FinetuneConfig, InputMode,
};
use selfdana_core::model::{init_params, load_checkpoint, ModelConfig};
use selfdana_core::rng::{purpose, RngStream};
use selfdana_core::signal_io::{LeadId, Window, WindowDataset};
use selfdana_core::tensor::Graph;

// -------------------------------------------------------------- test helpers

/// Pearson chi-squared statistic for observed counts against a uniform
/// expectation.
fn chi_squared_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum()
}

// Upper 1% chi-squared critical value, 3 degrees of freedom.
const CHI2_CRIT_DF3: f64 = 11.345;

/// 12-lead noise windows laid out per `(subject, record, n_windows, labels)`.
fn noise_dataset(spec: &[(&str, &str, usize, &[&str])], t: usize, seed: u64) -> WindowDataset {
    let mut rng = RngStream::from_seed(seed).child(purpose::SYNTH, &[0]);
    let mut windows = Vec::new();
    for (subject, record, n, labels) in spec {
        for w in 0..*n {
            let samples = Array2::from_shape_fn((12, t), |_| rng.normal(0.0, 1.0));
            windows.push(Window {
                subject_id: subject.to_string(),
                record_id: record.to_string(),
                window_index: w,
                fs: 64.0,
                leads: LeadId::ALL.to_vec(),
                samples,
                labels: labels.iter().map(|s| s.to_string()).collect(),
            });
        }
    }
    WindowDataset::from_windows(windows).unwrap()
}

/// Two cleanly separable rhythm classes: sine windows versus square-wave
/// windows, one window per record, distinct subjects.
fn separable_dataset(n_per_class: usize, t: usize, seed: u64) -> WindowDataset {
    let mut rng = RngStream::from_seed(seed).child(purpose::SYNTH, &[1]);
    let fs = 64.0;
    let mut windows = Vec::new();
    for i in 0..n_per_class * 2 {
        let class = if i % 2 == 0 { "rhythm_sine" } else { "rhythm_square" };
        let freq = 3.0 + (i % 3) as f64;
        let samples = Array2::from_shape_fn((12, t), |(c, s)| {
            let phase = 2.0 * std::f64::consts::PI * freq * s as f64 / fs;
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
    WindowDataset::from_windows(windows).unwrap()
}

fn quick_config(max_epochs: usize, seeds: Vec<u64>) -> FinetuneConfig {
    FinetuneConfig {
        batch_size: 8,
        lr0: 1e-3,
        gamma: 0.97,
        max_epochs,
        patience: 50,
        min_delta: 0.0,
        seeds,
        leadset: "12".to_string(),
        input_mode: InputMode::Dap,
    }
}

// ------------------------------------------------------------------ leadsets

#[test]
fn named_leadsets_resolve_to_the_documented_lead_lists() {
    use LeadId::*;
    assert_eq!(parse_leadset("12").unwrap(), LeadId::ALL.to_vec());
    assert_eq!(parse_leadset("6").unwrap(), vec![I, II, III, AVF, AVL, AVR]);
    assert_eq!(parse_leadset("3").unwrap(), vec![I, II, V2]);
    assert_eq!(parse_leadset("2").unwrap(), vec![I, II]);
    assert_eq!(parse_leadset("1").unwrap(), vec![I]);
}

#[test]
fn explicit_leadsets_parse_and_reject_bad_input() {
    use LeadId::*;
    assert_eq!(parse_leadset("I,II,V2").unwrap(), vec![I, II, V2]);
    assert_eq!(parse_leadset(" aVL , V6 ").unwrap(), vec![AVL, V6]);
    assert!(parse_leadset("I,I").is_err(), "duplicate lead must be rejected");
    assert!(parse_leadset("I,Q7").is_err(), "unknown code must be rejected");
    assert!(parse_leadset("").is_err(), "empty leadset must be rejected");
}

// ----------------------------------------------------------- epoch planning

#[test]
fn epoch_plan_uses_the_floor_rule() {
    let plan = EpochPlan::new(13_450, 128).unwrap();
    assert_eq!(plan.batches_per_epoch, 105);
    assert_eq!(EpochPlan::new(128, 128).unwrap().batches_per_epoch, 1);
    assert_eq!(EpochPlan::new(255, 128).unwrap().batches_per_epoch, 1);
    assert!(EpochPlan::new(127, 128).is_err(), "fewer than one batch");
    assert!(EpochPlan::new(10, 0).is_err(), "zero batch size");
}

// ------------------------------------------------------------------- labels

#[test]
fn multi_hot_encodes_against_the_class_list() {
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let labels: Vec<String> = ["c", "a", "zzz"].iter().map(|s| s.to_string()).collect();
    assert_eq!(multi_hot(&labels, &classes), vec![1.0, 0.0, 1.0]);
    assert_eq!(multi_hot(&[], &classes), vec![0.0, 0.0, 0.0]);
}

// ------------------------------------------------------- binary cross-entropy

#[test]
fn bce_on_perfect_predictions_is_tiny() {
    let graph = Graph::<f64>::new();
    let targets = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let probs = graph.constant(targets.clone());
    let loss = bce_loss(&probs, &targets);
    let v = loss.value().iter().copied().next().unwrap();
    assert!(v >= 0.0 && v < 1e-5, "perfect-prediction loss {v}");
}

#[test]
fn bce_at_one_half_equals_ln_two() {
    let graph = Graph::<f64>::new();
    let targets = ArrayD::from_shape_vec(IxDyn(&[4, 2]), vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let probs = graph.constant(ArrayD::from_elem(IxDyn(&[4, 2]), 0.5));
    let loss = bce_loss(&probs, &targets);
    let v = loss.value().iter().copied().next().unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12, "got {v}");
}

#[test]
fn bce_matches_a_brute_force_oracle() {
    let mut rng = RngStream::from_seed(41).child(purpose::SYNTH, &[9]);
    for trial in 0..20 {
        let (b, k) = (3 + trial % 4, 2 + trial % 3);
        let probs_nd = ArrayD::from_shape_fn(IxDyn(&[b, k]), |_| rng.uniform(1e-4, 1.0 - 1e-4));
        let targets = ArrayD::from_shape_fn(IxDyn(&[b, k]), |_| (rng.index(2)) as f64);
        // Independent accumulation with the documented clamp.
        let mut expected = 0.0;
        for (p, y) in probs_nd.iter().zip(targets.iter()) {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            expected -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        expected /= (b * k) as f64;
        let graph = Graph::<f64>::new();
        let probs = graph.constant(probs_nd);
        let loss = bce_loss(&probs, &targets);
        let v = loss.value().iter().copied().next().unwrap();
        assert!((v - expected).abs() <= 1e-7, "trial {trial}: {v} vs {expected}");
    }
}

// --------------------------------------------------------- balanced sampling

#[test]
fn balanced_index_rejects_unsupported_classes() {
    let data = noise_dataset(&[("s0", "r0", 4, &["a"])], 32, 5);
    let err = BalancedIndex::build(&data.bank, &["a".into(), "ghost".into()]).unwrap_err();
    match err {
        CoreError::Validation(msg) => assert!(msg.contains("ghost"), "{msg}"),
        other => panic!("unexpected error {other:?}"),
    }
    assert!(BalancedIndex::build(&data.bank, &[]).is_err(), "empty class list");
}

#[test]
fn sampler_balances_classes_despite_window_imbalance() {
    // Class "rare" has a single window; class "common" has 99. A balanced
    // sampler must still draw each class half the time.
    let data = noise_dataset(
        &[("sa", "ra", 1, &["rare"]), ("sb", "rb", 99, &["common"])],
        32,
        11,
    );
    let index = BalancedIndex::build(&data.bank, &["rare".into(), "common".into()]).unwrap();
    let mut rng = RngStream::from_seed(2024).child(purpose::SAMPLE, &[0]);
    let draws = balanced_batch(&index, 10_000, &mut rng);
    let rare = draws
        .iter()
        .filter(|&&i| data.bank.entries[i].labels[0] == "rare")
        .count() as f64
        / 10_000.0;
    assert!((rare - 0.5).abs() <= 0.02, "rare-class frequency {rare}");
}

#[test]
fn sampler_class_marginal_passes_chi_squared_at_one_percent() {
    let data = noise_dataset(
        &[
            ("s0", "r0", 1, &["w"]),
            ("s1", "r1", 3, &["x"]),
            ("s2", "r2", 50, &["y"]),
            ("s3", "r3", 99, &["z"]),
        ],
        32,
        13,
    );
    let classes: Vec<String> = ["w", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let index = BalancedIndex::build(&data.bank, &classes).unwrap();
    let mut rng = RngStream::from_seed(77).child(purpose::SAMPLE, &[1]);
    let draws = balanced_batch(&index, 10_000, &mut rng);
    let mut counts = [0usize; 4];
    for &i in &draws {
        let label = &data.bank.entries[i].labels[0];
        let k = classes.iter().position(|c| c == label).unwrap();
        counts[k] += 1;
    }
    let chi2 = chi_squared_uniform(&counts);
    assert!(chi2 < CHI2_CRIT_DF3, "chi-squared {chi2} over {counts:?}");
}

#[test]
fn sampler_balances_subjects_within_a_class() {
    // One class, two subjects: 1 window versus 99. Subject draws must still
    // be even.
    let data = noise_dataset(
        &[("alice", "ra", 1, &["c"]), ("bob", "rb", 99, &["c"])],
        32,
        17,
    );
    let index = BalancedIndex::build(&data.bank, &["c".into()]).unwrap();
    let mut rng = RngStream::from_seed(31).child(purpose::SAMPLE, &[2]);
    let draws = balanced_batch(&index, 10_000, &mut rng);
    let alice = draws
        .iter()
        .filter(|&&i| data.bank.entries[i].subject_id == "alice")
        .count() as f64
        / 10_000.0;
    assert!((alice - 0.5).abs() <= 0.02, "subject-A frequency {alice}");
}

// ----------------------------------------------------- input-mode equivalence

#[test]
fn full_leadset_dap_and_zero_pad_produce_identical_curves() {
    let model = ModelConfig::tiny();
    let train = separable_dataset(12, 192, 3);
    let val = separable_dataset(4, 192, 4);
    let classes: Vec<String> = vec!["rhythm_sine".into(), "rhythm_square".into()];
    let mut config = quick_config(2, vec![5]);
    let dir = tempfile::tempdir().unwrap();

    config.input_mode = InputMode::Dap;
    let dap = finetune_one_seed(None, &train, &val, &classes, &model, &config, 5, &dir.path().join("dap")).unwrap();
    config.input_mode = InputMode::ZeroPad;
    let zp = finetune_one_seed(None, &train, &val, &classes, &model, &config, 5, &dir.path().join("zp")).unwrap();

    assert_eq!(dap.state.history.len(), zp.state.history.len());
    for (a, b) in dap.state.history.iter().zip(zp.state.history.iter()) {
        assert!(
            (a.train_loss - b.train_loss).abs() <= 1e-6,
            "epoch {}: train {} vs {}",
            a.epoch,
            a.train_loss,
            b.train_loss
        );
        assert!(
            (a.val_loss - b.val_loss).abs() <= 1e-6,
            "epoch {}: val {} vs {}",
            a.epoch,
            a.val_loss,
            b.val_loss
        );
    }
}

// ------------------------------------------------------------- training loop

#[test]
fn supervised_training_reduces_the_loss_on_separable_data() {
    let model = ModelConfig::tiny();
    let train = separable_dataset(16, 192, 21);
    let val = separable_dataset(4, 192, 22);
    let classes: Vec<String> = vec!["rhythm_sine".into(), "rhythm_square".into()];
    let config = quick_config(20, vec![0]);
    let dir = tempfile::tempdir().unwrap();
    let outcomes = train_supervised(&train, &val, &classes, &model, &config, dir.path()).unwrap();
    assert_eq!(outcomes.len(), 1);
    let history = &outcomes[0].state.history;
    let first = history.first().unwrap().train_loss;
    let last = history.last().unwrap().train_loss;
    assert!(
        last <= 0.7 * first,
        "train loss fell only from {first} to {last} over {} epochs",
        history.len()
    );
}

#[test]
fn same_seed_reproduces_and_different_seeds_diverge() {
    let model = ModelConfig::tiny();
    let train = separable_dataset(8, 192, 31);
    let val = separable_dataset(2, 192, 32);
    let classes: Vec<String> = vec!["rhythm_sine".into(), "rhythm_square".into()];
    let config = quick_config(2, vec![7]);
    let dir = tempfile::tempdir().unwrap();

    let a = finetune_one_seed(None, &train, &val, &classes, &model, &config, 7, &dir.path().join("a")).unwrap();
    let b = finetune_one_seed(None, &train, &val, &classes, &model, &config, 7, &dir.path().join("b")).unwrap();
    for (x, y) in a.state.history.iter().zip(b.state.history.iter()) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
    }
    let c = finetune_one_seed(None, &train, &val, &classes, &model, &config, 8, &dir.path().join("c")).unwrap();
    assert_ne!(
        a.state.history[0].train_loss.to_bits(),
        c.state.history[0].train_loss.to_bits(),
        "different seeds should give different trajectories"
    );
}

#[test]
fn multi_seed_run_writes_curves_checkpoints_and_manifest() {
    let model = ModelConfig::tiny();
    let train = separable_dataset(8, 192, 41);
    let val = separable_dataset(2, 192, 42);
    let classes: Vec<String> = vec!["rhythm_sine".into(), "rhythm_square".into()];
    let config = quick_config(2, vec![0, 1]);
    let dir = tempfile::tempdir().unwrap();
    let outcomes = finetune(None, &train, &val, &classes, &model, &config, dir.path()).unwrap();
    assert_eq!(outcomes.len(), 2);
    for o in &outcomes {
        assert!(o.curve_path.exists(), "missing {:?}", o.curve_path);
        assert!(o.checkpoint_path.exists(), "missing {:?}", o.checkpoint_path);
        let (store, echo, opt) = load_checkpoint::<f32>(&o.checkpoint_path).unwrap();
        assert!(opt.is_none(), "fine-tune checkpoints carry no optimizer state");
        assert_eq!(echo["seed"], serde_json::json!(o.seed));
        assert_eq!(echo["init"], serde_json::json!("random"));
        let w = store.get("classify.weight").unwrap();
        assert_eq!(w.value.shape(), &[2, model.embed_dim]);
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["train_hash"], serde_json::json!(bank_hash(&train.bank).unwrap()));
    assert_eq!(manifest["finetune"]["leadset"], serde_json::json!("12"));
    assert_eq!(manifest["train_windows"], serde_json::json!(train.len()));
}

#[test]
fn checkpoint_initialization_is_used_and_duplicates_are_rejected() {
    let model = ModelConfig::tiny();
    let train = separable_dataset(8, 192, 51);
    let val = separable_dataset(2, 192, 52);
    let classes: Vec<String> = vec!["rhythm_sine".into(), "rhythm_square".into()];
    let config = quick_config(1, vec![3]);
    let dir = tempfile::tempdir().unwrap();

    let mut rng_a = RngStream::from_seed(100).child(purpose::INIT, &[0]);
    let base_a = init_params::<f32>(&model, None, &mut rng_a).unwrap();
    let mut rng_b = RngStream::from_seed(200).child(purpose::INIT, &[0]);
    let base_b = init_params::<f32>(&model, None, &mut rng_b).unwrap();

    let a = finetune_one_seed(Some(&base_a), &train, &val, &classes, &model, &config, 3, &dir.path().join("a")).unwrap();
    let b = finetune_one_seed(Some(&base_b), &train, &val, &classes, &model, &config, 3, &dir.path().join("b")).unwrap();
    assert_ne!(
        a.state.history[0].train_loss.to_bits(),
        b.state.history[0].train_loss.to_bits(),
        "different starting weights must change the trajectory"
    );

    // A store that already owns a classification head cannot take another.
    let mut rng_c = RngStream::from_seed(300).child(purpose::INIT, &[0]);
    let with_head = init_params::<f32>(&model, Some(2), &mut rng_c).unwrap();
    let err = finetune_one_seed(Some(&with_head), &train, &val, &classes, &model, &config, 3, &dir.path().join("c"));
    assert!(err.is_err(), "duplicate classification head must be rejected");
}

#[test]
fn attach_classify_head_adds_fresh_trainable_tensors() {
    let model = ModelConfig::tiny();
    let mut rng = RngStream::from_seed(9).child(purpose::INIT, &[0]);
    let mut store = init_params::<f32>(&model, None, &mut rng).unwrap();
    assert!(store.get("classify.weight").is_err());
    let mut head_rng = RngStream::from_seed(9).child(purpose::INIT, &[1]);
    attach_classify_head(&mut store, model.embed_dim, 5, &mut head_rng).unwrap();
    let w = store.get("classify.weight").unwrap();
    assert_eq!(w.value.shape(), &[5, model.embed_dim]);
    assert!(w.trainable);
    let b = store.get("classify.bias").unwrap();
    assert_eq!(b.value.shape(), &[5]);
    assert!(b.value.iter().all(|&v| v == 0.0), "bias starts at zero");
}

// -------------------------------------------------------------------- output

#[test]
fn predict_probs_returns_probabilities_and_truths() {
    let model = ModelConfig::tiny();
    let data = separable_dataset(4, 192, 61);
    let classes: Vec<String> = vec!["rhythm_sine".into(), "rhythm_square".into()];
    let mut rng = RngStream::from_seed(5).child(purpose::INIT, &[0]);
    let store = init_params::<f32>(&model, Some(2), &mut rng).unwrap();
    let (probs, truths) = predict_probs(&store, &data, &classes, &model, "3", InputMode::Dap, 3).unwrap();
    assert_eq!(probs.shape(), &[8, 2]);
    assert_eq!(truths.shape(), &[8, 2]);
    assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    for (i, entry) in data.bank.entries.iter().enumerate() {
        let expect = multi_hot(&entry.labels, &classes);
        assert_eq!(truths[(i, 0)], expect[0]);
        assert_eq!(truths[(i, 1)], expect[1]);
    }
}

#[test]
fn bank_hash_tracks_content() {
    let a = noise_dataset(&[("s0", "r0", 3, &["a"])], 32, 71);
    let b = noise_dataset(&[("s0", "r0", 3, &["a"])], 32, 71);
    assert_eq!(bank_hash(&a.bank).unwrap(), bank_hash(&b.bank).unwrap());
    let c = noise_dataset(&[("s0", "r0", 3, &["b"])], 32, 71);
    assert_ne!(bank_hash(&a.bank).unwrap(), bank_hash(&c.bank).unwrap());
    assert_eq!(bank_hash(&a.bank).unwrap().len(), 64, "hex sha-256");
}
