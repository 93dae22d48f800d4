//! Supervised adaptation: classification-head attachment, class-balanced
//! hierarchical sampling, binary cross-entropy, the fine-tuning loop with
//! either input mode (channel-adaptive or zero-padded), and
//! supervised-from-scratch training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::model::{
    backbone_forward, classify, init_params, save_checkpoint, zero_pad_window, AdamConfig,
    AdamState, ModelConfig, ParameterStore,
};
use crate::rng::{purpose, RngStream};
use crate::signal_io::{LeadId, WindowBank, WindowDataset};
use crate::ssl_pretrain::{early_stop_update, lr_schedule, write_curve, EpochRecord, TrainState};
use crate::tensor::{Graph, Tensor};

// ------------------------------------------------------------ configuration

/// How reduced-lead batches reach the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Feed the C selected rows directly; the encoder pools over whatever
    /// channel count arrives.
    Dap,
    /// Place the selected rows at their canonical positions in a 12-row
    /// tensor, zero elsewhere.
    ZeroPad,
}

/// Hyperparameters of the supervised fine-tuning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// One independent run per seed.
    pub seeds: Vec<u64>,
    /// Either a named count ("12", "6", "3", "2", "1") or an explicit
    /// comma-separated lead list such as "I,II,V2".
    pub leadset: String,
    pub input_mode: InputMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr0: 1e-5,
            gamma: 0.97,
            max_epochs: 50,
            patience: 10,
            min_delta: 1e-3,
            seeds: vec![0, 1, 2, 3, 4],
            leadset: "12".to_string(),
            input_mode: InputMode::Dap,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(CoreError::validation("batch size must be positive".to_string()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(CoreError::validation(format!(
                "initial learning rate must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CoreError::validation(format!(
                "decay factor must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(CoreError::validation(
                "max_epochs and patience must be positive".to_string(),
            ));
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return Err(CoreError::validation("min_delta must be non-negative".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(CoreError::validation("at least one seed is required".to_string()));
        }
        parse_leadset(&self.leadset)?;
        Ok(())
    }
}

/// Resolve a leadset string: the five named reduced configurations by their
/// lead count, or an explicit comma-separated list of lead codes.
pub fn parse_leadset(spec: &str) -> Result<Vec<LeadId>> {
    use LeadId::*;
    let named: Option<Vec<LeadId>> = match spec.trim() {
        "12" => Some(LeadId::ALL.to_vec()),
        "6" => Some(vec![I, II, III, AVF, AVL, AVR]),
        "3" => Some(vec![I, II, V2]),
        "2" => Some(vec![I, II]),
        "1" => Some(vec![I]),
        _ => None,
    };
    let leads = match named {
        Some(l) => l,
        None => spec
            .split(',')
            .map(|code| LeadId::from_code(code.trim()))
            .collect::<Result<Vec<_>>>()?,
    };
    if leads.is_empty() {
        return Err(CoreError::validation("empty leadset".to_string()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for lead in &leads {
        if !seen.insert(lead.tag()) {
            return Err(CoreError::validation(format!(
                "leadset repeats lead {}",
                lead.code()
            )));
        }
    }
    Ok(leads)
}

/// Batch accounting for one epoch: exactly `batches_per_epoch =
/// floor(total_windows / batch_size)` optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub total_windows: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
}

impl EpochPlan {
    pub fn new(total_windows: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(CoreError::validation("batch size must be positive".to_string()));
        }
        let batches_per_epoch = total_windows / batch_size;
        if batches_per_epoch == 0 {
            return Err(CoreError::validation(format!(
                "{total_windows} windows are fewer than one batch of {batch_size}"
            )));
        }
        Ok(Self {
            total_windows,
            batch_size,
            batches_per_epoch,
        })
    }
}

// ------------------------------------------------------------------ labels

/// Multi-hot encode `labels` against the ordered class list. Labels outside
/// the list are ignored.
pub fn multi_hot(labels: &[String], class_list: &[String]) -> Vec<f64> {
    class_list
        .iter()
        .map(|c| labels.iter().any(|l| l == c) as usize as f64)
        .collect()
}

/// Mean binary cross-entropy between predicted probabilities and a 0/1
/// target of the same shape (probabilities are clamped away from the log
/// singularities inside).
pub fn bce_loss<T: crate::scalar::Scalar>(probs: &Tensor<T>, targets: &ArrayD<T>) -> Tensor<T> {
    probs.bce_probs(targets)
}

// ---------------------------------------------------------- balanced sampler

/// Class → subject → recording → window index hierarchy backing the
/// class-balanced sampler. Orderings are lexicographic, so a fixed seed
/// draws an identical sequence on every run.
#[derive(Debug, Clone)]
pub struct BalancedIndex {
    /// For each class: subjects having it; for each subject: recordings
    /// having it; for each recording: every window index of the recording.
    hierarchy: Vec<Vec<(String, Vec<(String, Vec<usize>)>)>>,
    class_list: Vec<String>,
}

impl BalancedIndex {
    pub fn build(bank: &WindowBank, class_list: &[String]) -> Result<Self> {
        if class_list.is_empty() {
            return Err(CoreError::validation("empty class list".to_string()));
        }
        // record -> all window indices (hierarchy leaves).
        let mut record_windows: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, entry) in bank.entries.iter().enumerate() {
            record_windows
                .entry((entry.subject_id.clone(), entry.record_id.clone()))
                .or_default()
                .push(i);
        }
        let mut hierarchy = Vec::with_capacity(class_list.len());
        for class in class_list {
            // subject -> set of records of that subject having the class.
            let mut subjects: BTreeMap<String, BTreeMap<String, ()>> = BTreeMap::new();
            for entry in &bank.entries {
                if entry.labels.iter().any(|l| l == class) {
                    subjects
                        .entry(entry.subject_id.clone())
                        .or_default()
                        .insert(entry.record_id.clone(), ());
                }
            }
            if subjects.is_empty() {
                return Err(CoreError::validation(format!(
                    "class {class} has no supporting windows"
                )));
            }
            let per_class: Vec<(String, Vec<(String, Vec<usize>)>)> = subjects
                .into_iter()
                .map(|(subject, records)| {
                    let recs = records
                        .into_keys()
                        .map(|record| {
                            let windows = record_windows
                                .get(&(subject.clone(), record.clone()))
                                .expect("record seen in entries")
                                .clone();
                            (record, windows)
                        })
                        .collect();
                    (subject, recs)
                })
                .collect();
            hierarchy.push(per_class);
        }
        Ok(Self {
            hierarchy,
            class_list: class_list.to_vec(),
        })
    }

    pub fn class_list(&self) -> &[String] {
        &self.class_list
    }

    /// Draw one window: class uniform → subject uniform among subjects
    /// having it → recording uniform among that subject's recordings having
    /// it → window uniform within the recording.
    pub fn draw(&self, rng: &mut RngStream) -> usize {
        let class = &self.hierarchy[rng.index(self.hierarchy.len())];
        let (_, records) = &class[rng.index(class.len())];
        let (_, windows) = &records[rng.index(records.len())];
        windows[rng.index(windows.len())]
    }
}

/// One class-balanced batch of window indices.
pub fn balanced_batch(index: &BalancedIndex, n: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| index.draw(rng)).collect()
}

// --------------------------------------------------------------- batch build

/// Positions of `leadset` rows inside the bank's lead layout.
pub(crate) fn lead_rows(bank_leads: &[LeadId], leadset: &[LeadId]) -> Result<Vec<usize>> {
    leadset
        .iter()
        .map(|lead| {
            bank_leads.iter().position(|b| b == lead).ok_or_else(|| {
                CoreError::validation(format!(
                    "lead {} not present in the window bank",
                    lead.code()
                ))
            })
        })
        .collect()
}

/// Build the `(B, C, T)` (or `(B, 12, T)` zero-padded) input tensor and the
/// `(B, K)` multi-hot target for the windows at `indices`.
pub(crate) fn assemble_supervised_batch(
    dataset: &WindowDataset,
    indices: &[usize],
    rows: &[usize],
    leadset: &[LeadId],
    input_mode: InputMode,
    class_list: &[String],
) -> Result<(ArrayD<f32>, ArrayD<f32>)> {
    let t = dataset.bank.window_len;
    let channels = match input_mode {
        InputMode::Dap => leadset.len(),
        InputMode::ZeroPad => 12,
    };
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[indices.len(), channels, t]));
    let mut y = ArrayD::<f32>::zeros(IxDyn(&[indices.len(), class_list.len()]));
    for (bi, &idx) in indices.iter().enumerate() {
        let window = dataset
            .data
            .get(idx)
            .ok_or_else(|| CoreError::validation(format!("window index {idx} out of range")))?;
        let mut selected = Array2::<f64>::zeros((leadset.len(), t));
        for (r, &src) in rows.iter().enumerate() {
            selected.row_mut(r).assign(&window.row(src));
        }
        let placed = match input_mode {
            InputMode::Dap => selected,
            InputMode::ZeroPad => zero_pad_window(&selected, leadset)?,
        };
        let mut dst = x.slice_mut(ndarray::s![bi, .., ..]);
        for (d, &s) in dst.iter_mut().zip(placed.iter()) {
            *d = s as f32;
        }
        let labels = multi_hot(&dataset.bank.entries[idx].labels, class_list);
        for (k, v) in labels.iter().enumerate() {
            y[[bi, k]] = *v as f32;
        }
    }
    Ok((x, y))
}

// -------------------------------------------------------------- fit and eval

/// Artifacts and summary of one fine-tuning run (one seed).
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub seed: u64,
    pub state: TrainState,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub checkpoint_path: PathBuf,
    pub curve_path: PathBuf,
}

fn supervised_val_loss(
    store: &ParameterStore<f32>,
    val: &WindowDataset,
    rows: &[usize],
    leadset: &[LeadId],
    config: &FinetuneConfig,
    model_config: &ModelConfig,
    class_list: &[String],
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    let mut start = 0usize;
    while start < val.len() {
        let end = (start + config.batch_size).min(val.len());
        let indices: Vec<usize> = (start..end).collect();
        let (x, y) = assemble_supervised_batch(
            val,
            &indices,
            rows,
            leadset,
            config.input_mode,
            class_list,
        )?;
        let graph = Graph::<f32>::new();
        graph.set_grad_enabled(false);
        let mut drop_rng = RngStream::from_seed(0);
        let input = graph.constant(x);
        let tokens = backbone_forward(&graph, store, &input, model_config, &mut drop_rng)?;
        let probs = classify(&graph, store, &tokens)?;
        let loss = bce_loss(&probs, &y);
        let value = loss.value().iter().copied().next().expect("scalar loss") as f64;
        if !value.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "validation loss on windows {start}..{end}"
            )));
        }
        total += value;
        batches += 1;
        start = end;
    }
    if batches == 0 {
        return Err(CoreError::validation("validation set is empty".to_string()));
    }
    Ok(total / batches as f64)
}

/// Freshly initialize and attach the classification head for `n_classes`.
pub fn attach_classify_head(
    store: &mut ParameterStore<f32>,
    embed_dim: usize,
    n_classes: usize,
    rng: &mut RngStream,
) -> Result<()> {
    let mut weight = ArrayD::<f32>::zeros(IxDyn(&[n_classes, embed_dim]));
    for v in weight.iter_mut() {
        *v = rng.normal(0.0, 0.02) as f32;
    }
    store.insert("classify.weight", weight, true)?;
    store.insert("classify.bias", ArrayD::zeros(IxDyn(&[n_classes])), true)?;
    Ok(())
}

/// Fine-tune for one seed. `init_store` carries pretrained encoder (and
/// projection-head) tensors; `None` trains from random initialization. The
/// classification head is always freshly drawn from this seed. Training
/// batches are class-balanced; validation runs the natural distribution
/// without augmentation. All parameters are trainable.
pub fn finetune_one_seed(
    init_store: Option<&ParameterStore<f32>>,
    train: &WindowDataset,
    val: &WindowDataset,
    class_list: &[String],
    model_config: &ModelConfig,
    config: &FinetuneConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    model_config.validate()?;
    config.validate()?;
    if class_list.is_empty() {
        return Err(CoreError::validation("empty class list".to_string()));
    }
    let leadset = parse_leadset(&config.leadset)?;
    let rows = lead_rows(&train.bank.leads, &leadset)?;
    let val_rows = lead_rows(&val.bank.leads, &leadset)?;
    if rows != val_rows {
        return Err(CoreError::validation(
            "train and validation banks disagree on lead layout".to_string(),
        ));
    }
    let plan = EpochPlan::new(train.len(), config.batch_size)?;
    let index = BalancedIndex::build(&train.bank, class_list)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir.to_path_buf(), e))?;

    let root = RngStream::from_seed(seed);
    let mut store = match init_store {
        Some(base) => {
            let mut s = base.clone();
            attach_classify_head(
                &mut s,
                model_config.embed_dim,
                class_list.len(),
                &mut root.child(purpose::INIT, &[1]),
            )?;
            s
        }
        None => init_params::<f32>(
            model_config,
            Some(class_list.len()),
            &mut root.child(purpose::INIT, &[0]),
        )?,
    };
    let mut adam = AdamState::new(AdamConfig::default(), &store);
    let mut state = TrainState::new();
    let checkpoint_path = out_dir.join(format!("finetune_best_seed{seed}.ckpt"));
    let curve_path = out_dir.join(format!("finetune_curve_seed{seed}.csv"));
    let config_echo = serde_json::json!({
        "model": model_config,
        "finetune": config,
        "seed": seed,
        "classes": class_list,
        "init": if init_store.is_some() { "checkpoint" } else { "random" },
    });

    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        state.epoch = epoch;
        let lr = lr_schedule(config.lr0, config.gamma, epoch);
        let mut sample_rng = root.child(purpose::SAMPLE, &[epoch as u64]);
        let mut drop_rng = root.child(purpose::DROPOUT, &[epoch as u64]);

        let mut train_total = 0.0;
        for batch_idx in 0..plan.batches_per_epoch {
            let indices = balanced_batch(&index, config.batch_size, &mut sample_rng);
            let (x, y) = assemble_supervised_batch(
                train,
                &indices,
                &rows,
                &leadset,
                config.input_mode,
                class_list,
            )?;
            let graph = Graph::<f32>::new();
            graph.set_train(true);
            let input = graph.constant(x);
            let tokens = backbone_forward(&graph, &store, &input, model_config, &mut drop_rng)?;
            let probs = classify(&graph, &store, &tokens)?;
            let loss = bce_loss(&probs, &y);
            let value = loss.value().iter().copied().next().expect("scalar loss") as f64;
            if !value.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_idx}, seed {seed}"
                )));
            }
            train_total += value;
            let grads = graph.backward(&loss);
            adam.step(&mut store, &grads, lr)?;
        }
        let train_loss = train_total / plan.batches_per_epoch as f64;
        let val_loss = supervised_val_loss(
            &store,
            val,
            &rows,
            &leadset,
            config,
            model_config,
            class_list,
        )?;
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        let decision = early_stop_update(&mut state, val_loss, config.patience, config.min_delta);
        if decision.improved {
            save_checkpoint(&checkpoint_path, &store, &config_echo, None)?;
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    write_curve(&curve_path, &state.history)?;
    Ok(FinetuneOutcome {
        seed,
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        epochs_run: state.history.len(),
        stopped_early,
        checkpoint_path,
        curve_path,
        state,
    })
}

/// SHA-256 of a window bank's JSON form, identifying the exact split.
pub fn bank_hash(bank: &WindowBank) -> Result<String> {
    let bytes = serde_json::to_vec(bank)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Run [`finetune_one_seed`] for every configured seed and write a
/// `run_manifest.json` echoing the config and the split hashes.
pub fn finetune(
    init_store: Option<&ParameterStore<f32>>,
    train: &WindowDataset,
    val: &WindowDataset,
    class_list: &[String],
    model_config: &ModelConfig,
    config: &FinetuneConfig,
    out_dir: &Path,
) -> Result<Vec<FinetuneOutcome>> {
    config.validate()?;
    let mut outcomes = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        outcomes.push(finetune_one_seed(
            init_store,
            train,
            val,
            class_list,
            model_config,
            config,
            seed,
            out_dir,
        )?);
    }
    let manifest = serde_json::json!({
        "model": model_config,
        "finetune": config,
        "classes": class_list,
        "init": if init_store.is_some() { "checkpoint" } else { "random" },
        "train_windows": train.len(),
        "val_windows": val.len(),
        "train_hash": bank_hash(&train.bank)?,
        "val_hash": bank_hash(&val.bank)?,
        "runs": outcomes
            .iter()
            .map(|o| {
                serde_json::json!({
                    "seed": o.seed,
                    "best_epoch": o.best_epoch,
                    "best_val": o.best_val,
                    "epochs_run": o.epochs_run,
                    "stopped_early": o.stopped_early,
                    "checkpoint": o.checkpoint_path.file_name().map(|f| f.to_string_lossy().to_string()),
                    "curve": o.curve_path.file_name().map(|f| f.to_string_lossy().to_string()),
                })
            })
            .collect::<Vec<_>>(),
    });
    let path = out_dir.join("run_manifest.json");
    let body = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&path, body).map_err(|e| CoreError::io(path, e))?;
    Ok(outcomes)
}

/// Identical loop to [`finetune`] from random initialization with the
/// channel-adaptive input path — the supervised-from-scratch reference.
pub fn train_supervised(
    train: &WindowDataset,
    val: &WindowDataset,
    class_list: &[String],
    model_config: &ModelConfig,
    config: &FinetuneConfig,
    out_dir: &Path,
) -> Result<Vec<FinetuneOutcome>> {
    let mut config = config.clone();
    config.input_mode = InputMode::Dap;
    finetune(None, train, val, class_list, model_config, &config, out_dir)
}

/// Batched eval-mode forward pass over a whole dataset: returns the
/// predicted probabilities and the multi-hot truths, both `(B, K)`.
pub fn predict_probs(
    store: &ParameterStore<f32>,
    dataset: &WindowDataset,
    class_list: &[String],
    model_config: &ModelConfig,
    leadset_spec: &str,
    input_mode: InputMode,
    batch_size: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if dataset.is_empty() {
        return Err(CoreError::validation("empty dataset".to_string()));
    }
    let leadset = parse_leadset(leadset_spec)?;
    let rows = lead_rows(&dataset.bank.leads, &leadset)?;
    let k = class_list.len();
    let mut probs = Array2::<f64>::zeros((dataset.len(), k));
    let mut truths = Array2::<f64>::zeros((dataset.len(), k));
    let mut start = 0usize;
    while start < dataset.len() {
        let end = (start + batch_size.max(1)).min(dataset.len());
        let indices: Vec<usize> = (start..end).collect();
        let (x, y) = assemble_supervised_batch(
            dataset,
            &indices,
            &rows,
            &leadset,
            input_mode,
            class_list,
        )?;
        let graph = Graph::<f32>::new();
        graph.set_grad_enabled(false);
        let mut drop_rng = RngStream::from_seed(0);
        let input = graph.constant(x);
        let tokens = backbone_forward(&graph, store, &input, model_config, &mut drop_rng)?;
        let batch_probs = classify(&graph, store, &tokens)?;
        let pv = batch_probs.value();
        for (bi, idx) in indices.iter().enumerate() {
            for c in 0..k {
                probs[(*idx, c)] = pv[[bi, c]] as f64;
                truths[(*idx, c)] = y[[bi, c]] as f64;
            }
        }
        start = end;
    }
    Ok((probs, truths))
}
