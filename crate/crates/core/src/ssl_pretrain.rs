//! Contrastive pretraining: uniform window sampling, positive-pair batch
//! assembly per strategy, the NT-Xent objective, Adam with exponential
//! learning-rate decay, early stopping, and loss-curve logging.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::augment::{draw_rls_keep_count, make_positive_pair, AugmentationSpec, PairStrategy};
use crate::error::{CoreError, Result};
use crate::model::{
    backbone_forward, init_params, project, save_checkpoint, AdamConfig, AdamState, ModelConfig,
    ParameterStore,
};
use crate::rng::{purpose, RngStream};
use crate::scalar::Scalar;
use crate::signal_io::WindowDataset;
use crate::tensor::{Graph, Tensor};

// ------------------------------------------------------------ configuration

/// Hyperparameters of the contrastive pretraining loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Positive pairs per batch (the loss sees 2N embeddings).
    pub batch_size: usize,
    /// NT-Xent temperature τ.
    pub temperature: f64,
    /// Initial learning rate.
    pub lr0: f64,
    /// Per-epoch exponential decay factor γ.
    pub gamma: f64,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Validation loss must drop below best − min_delta to count as an
    /// improvement (strict inequality).
    pub min_delta: f64,
    /// How the two views of each positive pair are built.
    pub strategy: PairStrategy,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            temperature: 0.5,
            lr0: 5e-5,
            gamma: 0.97,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-5,
            strategy: PairStrategy::Base,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CoreError::validation(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CoreError::validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
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
        if self.max_epochs == 0 {
            return Err(CoreError::validation("max_epochs must be positive".to_string()));
        }
        if self.patience == 0 {
            return Err(CoreError::validation("patience must be positive".to_string()));
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return Err(CoreError::validation(format!(
                "min_delta must be non-negative, got {}",
                self.min_delta
            )));
        }
        Ok(())
    }
}

// ------------------------------------------------------------- loss and lr

/// NT-Xent over a `(2N, Dp)` embedding tensor whose rows 2i and 2i+1 form
/// the positive pair for sample i.
///
/// Each ordered direction (i, j) of every pair contributes
/// −log[ exp(sim(zᵢ,zⱼ)/τ) / Σ_{k≠i} exp(sim(zᵢ,z_k)/τ) ] with cosine
/// similarity; the result is the mean over all 2N directions. Zero-norm
/// rows are rejected (cosine similarity undefined).
pub fn nt_xent_loss<T: Scalar>(z: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let v = z.value();
    if v.ndim() != 2 {
        return Err(CoreError::validation(format!(
            "embeddings must be 2-d (2N, Dp), got {:?}",
            v.shape()
        )));
    }
    let rows = v.shape()[0];
    if rows < 2 || rows % 2 != 0 {
        return Err(CoreError::validation(format!(
            "need an even number of embedding rows >= 2, got {rows}"
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(CoreError::validation(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    for (i, row) in v
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("checked 2-d")
        .rows()
        .into_iter()
        .enumerate()
    {
        let norm_sq = row.iter().fold(T::zero(), |a, &x| a + x * x);
        if !(norm_sq.to_f64x() > 0.0) {
            return Err(CoreError::validation(format!(
                "zero-norm embedding row {i}"
            )));
        }
    }
    let zn = z.l2_normalize_rows();
    let sim = zn.matmul(&zn.permute(&[1, 0]));
    Ok(sim.contrastive_nll(temperature))
}

/// Exponentially decayed learning rate `lr0 · γ^epoch`.
pub fn lr_schedule(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

// ------------------------------------------------------------ early stopping

/// One row of a training curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Progress of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new() -> Self {
        Self {
            epoch: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            history: Vec::new(),
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

/// Outcome of feeding one validation loss into the early-stopping rule.
#[derive(Debug, Clone, Copy)]
pub struct StopDecision {
    /// The loss improved on the best by more than `min_delta`.
    pub improved: bool,
    /// The non-improvement counter reached `patience`; stop now.
    pub stop: bool,
}

/// Update the early-stopping counters: improvement requires
/// `val_loss < best − min_delta` (strict); the counter resets on
/// improvement and otherwise increments, stopping exactly when it reaches
/// `patience`.
pub fn early_stop_update(
    state: &mut TrainState,
    val_loss: f64,
    patience: usize,
    min_delta: f64,
) -> StopDecision {
    let improved = val_loss < state.best_val - min_delta;
    if improved {
        state.best_val = val_loss;
        state.best_epoch = state.epoch;
        state.since_improvement = 0;
    } else {
        state.since_improvement += 1;
    }
    StopDecision {
        improved,
        stop: state.since_improvement >= patience,
    }
}

// ----------------------------------------------------------------- sampling

/// Draw `batch_size` window indices i.i.d. uniform over `n_windows`, with
/// replacement.
pub fn sample_pretrain_batch(
    n_windows: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    if n_windows == 0 {
        return Err(CoreError::validation(
            "cannot sample from an empty window set".to_string(),
        ));
    }
    Ok((0..batch_size).map(|_| rng.index(n_windows)).collect())
}

// -------------------------------------------------------------- batch build

/// Build the `(2N, C, T)` training tensor for one batch: windows at
/// `indices` are expanded into positive pairs under `strategy` and
/// interleaved (rows 2i and 2i+1 are the two views of window i). For the
/// lead-selection strategy the kept-lead count is drawn here, once for the
/// whole batch.
pub fn assemble_pair_batch<T: Scalar>(
    data: &[Array2<f64>],
    indices: &[usize],
    strategy: PairStrategy,
    spec: &AugmentationSpec,
    rng: &mut RngStream,
) -> Result<ArrayD<T>> {
    if indices.is_empty() {
        return Err(CoreError::validation("empty batch".to_string()));
    }
    let batch_keep = match strategy {
        PairStrategy::BaseThenRls => Some(draw_rls_keep_count(spec, rng)),
        _ => None,
    };
    let mut views: Vec<(Array2<f64>, Array2<f64>)> = Vec::with_capacity(indices.len());
    for &idx in indices {
        let x = data
            .get(idx)
            .ok_or_else(|| CoreError::validation(format!("window index {idx} out of range")))?;
        views.push(make_positive_pair(x, strategy, batch_keep, spec, rng)?);
    }
    let (c, t) = views[0].0.dim();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[2 * views.len(), c, t]));
    for (i, (v1, v2)) in views.iter().enumerate() {
        for (view, row) in [(v1, 2 * i), (v2, 2 * i + 1)] {
            if view.dim() != (c, t) {
                return Err(CoreError::validation(format!(
                    "view shape {:?} disagrees with the batch shape ({c}, {t})",
                    view.dim()
                )));
            }
            let mut dst = out.slice_mut(ndarray::s![row, .., ..]);
            for (d, &s) in dst.iter_mut().zip(view.iter()) {
                *d = T::from_f64x(s);
            }
        }
    }
    Ok(out)
}

// ------------------------------------------------------------ training loop

/// Artifacts and summary of one pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub checkpoint_path: PathBuf,
    pub curve_path: PathBuf,
}

/// Mean NT-Xent over the validation set with the training augmentation
/// strategy applied but gradients off and the model in eval mode. The
/// validation stream is re-derived from the run seed each epoch, so every
/// epoch sees identical validation pairs and losses stay comparable.
fn validation_loss(
    store: &mut ParameterStore<f32>,
    val: &WindowDataset,
    model_config: &ModelConfig,
    config: &PretrainConfig,
    spec: &AugmentationSpec,
) -> Result<f64> {
    let mut rng = RngStream::from_seed(config.seed).child(purpose::VAL, &[0]);
    let n = config.batch_size.min(val.len());
    let mut total = 0.0;
    let mut batches = 0usize;
    let mut start = 0usize;
    while start < val.len() {
        let end = (start + n).min(val.len());
        let indices: Vec<usize> = (start..end).collect();
        let batch =
            assemble_pair_batch::<f32>(&val.data, &indices, config.strategy, spec, &mut rng)?;
        let graph = Graph::<f32>::new();
        graph.set_grad_enabled(false);
        let mut drop_rng = RngStream::from_seed(config.seed).child(purpose::DROPOUT, &[u64::MAX]);
        let x = graph.constant(batch);
        let tokens = backbone_forward(&graph, store, &x, model_config, &mut drop_rng)?;
        let z = project(&graph, store, &tokens)?;
        let loss = nt_xent_loss(&z, config.temperature)?;
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
    Ok(total / batches as f64)
}

/// Write a loss curve as CSV with columns `epoch,train_loss,val_loss,lr`.
pub fn write_curve(path: &Path, history: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.to_path_buf(), e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        CoreError::validation(format!("cannot open {}: {e}", path.display()))
    })?;
    writer
        .write_record(["epoch", "train_loss", "val_loss", "lr"])
        .and_then(|_| {
            for row in history {
                writer.write_record([
                    row.epoch.to_string(),
                    format!("{:.17e}", row.train_loss),
                    format!("{:.17e}", row.val_loss),
                    format!("{:.17e}", row.lr),
                ])?;
            }
            writer.flush().map_err(csv::Error::from)
        })
        .map_err(|e| CoreError::validation(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Run contrastive pretraining and leave `pretrain_best.ckpt` plus
/// `pretrain_curve.csv` in `out_dir`.
///
/// Each epoch runs `floor(train_windows / N)` batches of uniformly sampled
/// windows (with replacement), expands each window into an interleaved
/// positive-pair batch, takes one Adam step per batch at the epoch's
/// decayed learning rate, then scores the validation set (augmented,
/// gradients off) and applies early stopping. The best-validation
/// checkpoint is kept; a non-finite loss aborts with a diagnostic.
pub fn pretrain(
    train: &WindowDataset,
    val: &WindowDataset,
    model_config: &ModelConfig,
    config: &PretrainConfig,
    spec: &AugmentationSpec,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    model_config.validate()?;
    config.validate()?;
    spec.validate()?;
    if val.is_empty() {
        return Err(CoreError::validation("validation set is empty".to_string()));
    }
    let n_batches = train.len() / config.batch_size;
    if n_batches == 0 {
        return Err(CoreError::validation(format!(
            "training set has {} windows, fewer than one batch of {}",
            train.len(),
            config.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir.to_path_buf(), e))?;

    let root = RngStream::from_seed(config.seed);
    let mut store =
        init_params::<f32>(model_config, None, &mut root.child(purpose::INIT, &[0]))?;
    let mut adam = AdamState::new(AdamConfig::default(), &store);
    let mut state = TrainState::new();
    let checkpoint_path = out_dir.join("pretrain_best.ckpt");
    let curve_path = out_dir.join("pretrain_curve.csv");
    let config_echo = serde_json::json!({
        "model": model_config,
        "pretrain": config,
        "augment": spec,
    });

    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        state.epoch = epoch;
        let lr = lr_schedule(config.lr0, config.gamma, epoch);
        let mut sample_rng = root.child(purpose::SAMPLE, &[epoch as u64]);
        let mut aug_rng = root.child(purpose::AUGMENT, &[epoch as u64]);
        let mut drop_rng = root.child(purpose::DROPOUT, &[epoch as u64]);

        let mut train_total = 0.0;
        for batch_idx in 0..n_batches {
            let indices =
                sample_pretrain_batch(train.len(), config.batch_size, &mut sample_rng)?;
            let batch = assemble_pair_batch::<f32>(
                &train.data,
                &indices,
                config.strategy,
                spec,
                &mut aug_rng,
            )?;
            let graph = Graph::<f32>::new();
            graph.set_train(true);
            let x = graph.constant(batch);
            let tokens = backbone_forward(&graph, &store, &x, model_config, &mut drop_rng)?;
            let z = project(&graph, &mut store, &tokens)?;
            let loss = nt_xent_loss(&z, config.temperature)?;
            let value = loss.value().iter().copied().next().expect("scalar loss") as f64;
            if !value.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            train_total += value;
            let grads = graph.backward(&loss);
            adam.step(&mut store, &grads, lr)?;
        }
        let train_loss = train_total / n_batches as f64;
        let val_loss = validation_loss(&mut store, val, model_config, config, spec)?;
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
    // A run whose first epoch never improved on infinity cannot happen
    // (any finite loss improves), so the checkpoint always exists here.
    write_curve(&curve_path, &state.history)?;
    Ok(PretrainOutcome {
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        epochs_run: state.history.len(),
        stopped_early,
        checkpoint_path,
        curve_path,
        state,
    })
}
