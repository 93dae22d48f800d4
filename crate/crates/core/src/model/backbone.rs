//! Channel-adaptive encoder forward pass, projection/classification heads,
//! the zero-padding baseline path, parameter accounting, and a
//! finite-difference gradient check.

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};

use super::params::{init_params, ParameterStore};
use super::ModelConfig;
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::signal_io::LeadId;
use crate::tensor::nn::{batch_norm1d_eval, batch_norm1d_train, merge_heads, split_heads};
use crate::tensor::{Graph, Tensor};

/// Exponential-moving-average factor for the projection head's running
/// batch-norm statistics (the update uses the unbiased batch variance).
pub const BN_MOMENTUM: f64 = 0.1;

// ------------------------------------------------------------- forward pass

/// Encode a `B×C×T` batch into `B×L×D` token matrices.
///
/// Stages: per-channel temporal convs (stage 1 followed by group norm with
/// one group per feature map, all stages followed by GELU) → adaptive
/// average pooling over channels and time to `L` positions → layer norm →
/// linear lift to `D` → dropout → grouped positional convolution (per-tap
/// weight norm, even kernel, trailing output step trimmed, GELU, residual,
/// layer norm, dropout) → post-norm transformer blocks.
///
/// The channel count never parameterizes any layer, so any `C ∈ [1, 12]`
/// flows through the same weights; `rng` is consumed only when the graph is
/// in training mode and dropout is active.
/// Per-channel temporal feature encoder: `B×C×T` → `B×F×C×T4`, four
/// stride-2 convolutions along time only (channels never mix), group norm
/// (one group per feature map) after stage 1, GELU after every stage.
pub fn feature_encoder_forward<T: Scalar>(
    graph: &Graph<T>,
    store: &ParameterStore<T>,
    x: &Tensor<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let shape = x.value().shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::validation(format!(
            "encoder input must be (B, C, T), got {shape:?}"
        )));
    }
    let (b, c, t) = (shape[0], shape[1], shape[2]);
    if b == 0 || !(1..=12).contains(&c) {
        return Err(CoreError::validation(format!(
            "encoder input needs B >= 1 and 1 <= C <= 12, got B={b}, C={c}"
        )));
    }
    if t < 16 {
        return Err(CoreError::validation(format!(
            "encoder input needs T >= 16, got {t}"
        )));
    }
    if x.value().iter().any(|v| !v.to_f64x().is_finite()) {
        return Err(CoreError::NonFinite("encoder input".to_string()));
    }
    let mut h = x
        .reshape(&[b, 1, c, t])
        .conv_time_k2s2(&store.leaf(graph, "conv1.weight")?)
        .group_norm(
            &store.leaf(graph, "gn1.gamma")?,
            &store.leaf(graph, "gn1.beta")?,
            config.conv_channels,
            config.norm_eps,
        )
        .gelu();
    for i in 2..=4 {
        h = h
            .conv_time_k2s2(&store.leaf(graph, &format!("conv{i}.weight"))?)
            .gelu();
    }
    Ok(h)
}

pub fn backbone_forward<T: Scalar>(
    graph: &Graph<T>,
    store: &ParameterStore<T>,
    x: &Tensor<T>,
    config: &ModelConfig,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let l = config.dap_out_len;
    let d = config.embed_dim;
    let p = config.dropout;
    let eps = config.norm_eps;

    let h = feature_encoder_forward(graph, store, x, config)?;

    // Pool channels + time down to L positions and lift to the embed width.
    let mut tokens = h
        .dap_pool(l)
        .permute(&[0, 2, 1])
        .layer_norm(
            &store.leaf(graph, "pre_ln.gamma")?,
            &store.leaf(graph, "pre_ln.beta")?,
            eps,
        )
        .linear(
            &store.leaf(graph, "embed.weight")?,
            Some(&store.leaf(graph, "embed.bias")?),
        )
        .dropout(p, rng);

    // Positional encoding: grouped conv over the token axis.
    let w = Tensor::weight_norm_per_tap(
        &store.leaf(graph, "pos_conv.v")?,
        &store.leaf(graph, "pos_conv.g")?,
    );
    let pos = tokens
        .permute(&[0, 2, 1])
        .conv1d_grouped(
            &w,
            &store.leaf(graph, "pos_conv.bias")?,
            config.pos_conv_pad(),
            config.pos_conv_groups,
        )
        .narrow(2, 0, l)
        .gelu()
        .permute(&[0, 2, 1]);
    tokens = tokens
        .add(&pos)
        .layer_norm(
            &store.leaf(graph, "pos_ln.gamma")?,
            &store.leaf(graph, "pos_ln.beta")?,
            eps,
        )
        .dropout(p, rng);

    // Post-norm transformer blocks.
    let dh = d / config.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for blk in 0..config.n_blocks {
        let name = |part: &str| format!("block{blk}.{part}");
        let lin = |input: &Tensor<T>, part: &str| -> Result<Tensor<T>> {
            Ok(input.linear(
                &store.leaf(graph, &name(&format!("{part}.weight")))?,
                Some(&store.leaf(graph, &name(&format!("{part}.bias")))?),
            ))
        };
        let q = split_heads(&lin(&tokens, "attn.q")?, config.n_heads);
        let k = split_heads(&lin(&tokens, "attn.k")?, config.n_heads);
        let v = split_heads(&lin(&tokens, "attn.v")?, config.n_heads);
        let probs = q.bmm(&k, true).scale(scale).softmax_lastdim();
        let ctx = merge_heads(&probs.bmm(&v, false), config.n_heads);
        let attn_out = lin(&ctx, "attn.out")?.dropout(p, rng);
        tokens = tokens.add(&attn_out).layer_norm(
            &store.leaf(graph, &name("attn_ln.gamma"))?,
            &store.leaf(graph, &name("attn_ln.beta"))?,
            eps,
        );

        let ff = lin(&tokens, "ffn.w1")?.gelu();
        let ff = lin(&ff, "ffn.w2")?.dropout(p, rng);
        tokens = tokens.add(&ff).layer_norm(
            &store.leaf(graph, &name("ffn_ln.gamma"))?,
            &store.leaf(graph, &name("ffn_ln.beta"))?,
            eps,
        );
    }
    Ok(tokens)
}

/// Projection head for contrastive training: mean-pool the `L` token
/// positions, lift `D → proj_dim`, then batch-normalize.
///
/// In training mode the normalization uses batch statistics and folds them
/// into the stored running statistics (momentum [`BN_MOMENTUM`], unbiased
/// variance); a training batch of one row is rejected. In eval mode the
/// stored running statistics are used.
pub fn project<T: Scalar>(
    graph: &Graph<T>,
    store: &mut ParameterStore<T>,
    tokens: &Tensor<T>,
) -> Result<Tensor<T>> {
    let pooled = tokens.mean_axis(1).linear(
        &store.leaf(graph, "project.weight")?,
        Some(&store.leaf(graph, "project.bias")?),
    );
    let gamma = store.leaf(graph, "project_bn.gamma")?;
    let beta = store.leaf(graph, "project_bn.beta")?;
    if graph.is_train() {
        let n = pooled.value().shape()[0];
        let (out, mean, var_biased) = batch_norm1d_train(&pooled, &gamma, &beta, 1e-5)?;
        let unbias = T::from_f64x(n as f64 / (n as f64 - 1.0));
        let mom = T::from_f64x(BN_MOMENTUM);
        let keep = T::from_f64x(1.0 - BN_MOMENTUM);
        let mut rm = store.get("project_bn.running_mean")?.value.as_ref().clone();
        let mut rv = store.get("project_bn.running_var")?.value.as_ref().clone();
        for (r, &m) in rm.iter_mut().zip(mean.iter()) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in rv.iter_mut().zip(var_biased.iter()) {
            *r = keep * *r + mom * v * unbias;
        }
        store.set_value("project_bn.running_mean", rm)?;
        store.set_value("project_bn.running_var", rv)?;
        Ok(out)
    } else {
        let rm = store.get("project_bn.running_mean")?.value.as_ref().clone();
        let rv = store.get("project_bn.running_var")?.value.as_ref().clone();
        Ok(batch_norm1d_eval(&pooled, &gamma, &beta, &rm, &rv, 1e-5))
    }
}

/// Classification head: mean-pool the token positions, apply a linear map
/// to `K` logits, and squash with a sigmoid so every output lies in (0, 1).
pub fn classify<T: Scalar>(
    graph: &Graph<T>,
    store: &ParameterStore<T>,
    tokens: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(tokens
        .mean_axis(1)
        .linear(
            &store.leaf(graph, "classify.weight")?,
            Some(&store.leaf(graph, "classify.bias")?),
        )
        .sigmoid())
}

// ------------------------------------------------------- zero-pad baseline

/// Place a `C×T` window's rows at their canonical positions in a `12×T`
/// array, leaving every other row exactly zero.
pub fn zero_pad_window<T: Scalar>(x: &Array2<T>, leads: &[LeadId]) -> Result<Array2<T>> {
    if x.nrows() != leads.len() {
        return Err(CoreError::validation(format!(
            "zero_pad: {} rows but {} lead tags",
            x.nrows(),
            leads.len()
        )));
    }
    if leads.len() > 12 {
        return Err(CoreError::validation(format!(
            "zero_pad: {} leads exceed the 12-lead layout",
            leads.len()
        )));
    }
    let mut seen = [false; 12];
    let mut out = Array2::<T>::zeros((12, x.ncols()));
    for (row, lead) in leads.iter().enumerate() {
        let pos = lead.tag() as usize;
        if seen[pos] {
            return Err(CoreError::validation(format!(
                "zero_pad: duplicate lead {}",
                lead.code()
            )));
        }
        seen[pos] = true;
        out.row_mut(pos).assign(&x.row(row));
    }
    Ok(out)
}

/// Batch variant of [`zero_pad_window`]: `B×C×T` → `B×12×T` with every
/// window sharing one lead layout.
pub fn zero_pad_batch<T: Scalar>(x: &Array3<T>, leads: &[LeadId]) -> Result<Array3<T>> {
    let (b, _c, t) = x.dim();
    let mut out = Array3::<T>::zeros((b, 12, t));
    for (bi, window) in x.axis_iter(Axis(0)).enumerate() {
        let padded = zero_pad_window(&window.to_owned(), leads)?;
        out.index_axis_mut(Axis(0), bi).assign(&padded);
    }
    Ok(out)
}

// --------------------------------------------------- parameter accounting

/// Closed-form learnable-parameter counts per named component.
#[derive(Debug, Clone)]
pub struct ParamCount {
    /// Ordered per-component breakdown of the encoder.
    pub components: Vec<(String, usize)>,
    /// Encoder total (sum of `components`).
    pub backbone: usize,
    /// Projection head (linear + batch-norm affine).
    pub projection_head: usize,
    /// Classification head, when a class count is supplied.
    pub classification_head: Option<usize>,
    /// Encoder + projection head.
    pub total_with_projection: usize,
}

/// Count learnable parameters analytically from the layer dimensions.
/// Running batch-norm statistics are buffers, not parameters, and are
/// excluded. All temporal convolutions are bias-free; this convention is
/// what makes the full-preset encoder land exactly on its audited total.
pub fn count_parameters(config: &ModelConfig, n_classes: Option<usize>) -> Result<ParamCount> {
    config.validate()?;
    let f = config.conv_channels;
    let d = config.embed_dim;
    let ffn = config.ffn_dim;
    let k = config.pos_conv_kernel;
    let g = config.pos_conv_groups;
    let proj = config.proj_dim;

    let conv_stages = f * 2 + 3 * f * f * 2;
    let group_norm = 2 * f;
    let pre_layer_norm = 2 * f;
    let embed = d * f + d;
    let positional_conv = d * (d / g) * k + k + d;
    let positional_layer_norm = 2 * d;
    let per_block = 4 * (d * d + d) + 2 * d + (ffn * d + ffn) + (d * ffn + d) + 2 * d;
    let blocks = config.n_blocks * per_block;

    let components = vec![
        ("conv_stages".to_string(), conv_stages),
        ("group_norm".to_string(), group_norm),
        ("pre_layer_norm".to_string(), pre_layer_norm),
        ("embed".to_string(), embed),
        ("positional_conv".to_string(), positional_conv),
        ("positional_layer_norm".to_string(), positional_layer_norm),
        ("transformer_blocks".to_string(), blocks),
    ];
    let backbone: usize = components.iter().map(|(_, n)| n).sum();
    let projection_head = proj * d + proj + 2 * proj;
    let classification_head = n_classes.map(|classes| classes * d + classes);
    Ok(ParamCount {
        components,
        backbone,
        projection_head,
        classification_head,
        total_with_projection: backbone + projection_head,
    })
}

// ------------------------------------------------------------ gradient check

/// Which loss drives the finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub enum CheckLoss {
    /// Contrastive objective over `n_pairs` interleaved view pairs
    /// (backbone → projection head → cosine similarities → NT-Xent).
    Contrastive { n_pairs: usize, temperature: f64 },
    /// Multi-label objective on a batch (backbone → classification head →
    /// binary cross-entropy against random 0/1 targets).
    Classification { batch: usize, n_classes: usize },
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all sampled coordinates.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: String,
    /// Number of scalar coordinates compared.
    pub n_sampled: usize,
}

/// Compare reverse-mode gradients against central finite differences on
/// `min_samples` (or more) scalar parameters in double precision, covering
/// at least one coordinate of every tensor that receives a gradient.
///
/// The model runs in training mode with dropout masks re-derived from a
/// fixed stream each evaluation, so the loss is a deterministic, smooth
/// function of the parameters. Relative error uses
/// `|fd − g| / max(|fd|, |g|, 1e-6)`; the step is `1e-4 · max(1, |θ|)`.
pub fn gradient_check(
    config: &ModelConfig,
    loss: CheckLoss,
    seed: u64,
    min_samples: usize,
) -> Result<GradCheckReport> {
    config.validate()?;
    let mut init_rng = RngStream::from_seed(seed).child(crate::rng::purpose::INIT, &[0]);
    let n_classes = match loss {
        CheckLoss::Contrastive { .. } => None,
        CheckLoss::Classification { n_classes, .. } => Some(n_classes),
    };
    let mut store = init_params::<f64>(config, n_classes, &mut init_rng)?;

    // Fixed inputs/targets for every evaluation.
    let mut data_rng = RngStream::from_seed(seed).child(crate::rng::purpose::SYNTH, &[0]);
    let (b, c, t) = match loss {
        CheckLoss::Contrastive { n_pairs, .. } => (2 * n_pairs, 2, config.nominal_t),
        CheckLoss::Classification { batch, .. } => (batch, 3, config.nominal_t),
    };
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[b, c, t]));
    for v in x.iter_mut() {
        *v = data_rng.normal(0.0, 1.0);
    }
    let target = match loss {
        CheckLoss::Contrastive { .. } => None,
        CheckLoss::Classification { n_classes, .. } => {
            let mut tgt = ArrayD::<f64>::zeros(IxDyn(&[b, n_classes]));
            for v in tgt.iter_mut() {
                *v = data_rng.index(2) as f64;
            }
            Some(tgt)
        }
    };

    let dropout_seed = seed ^ 0x5eed_d40f;
    let eval_loss = |store: &mut ParameterStore<f64>| -> Result<f64> {
        let graph = Graph::<f64>::new();
        graph.set_train(true);
        let mut drop_rng = RngStream::from_seed(dropout_seed);
        let input = graph.constant(x.clone());
        let tokens = backbone_forward(&graph, store, &input, config, &mut drop_rng)?;
        let value = match loss {
            CheckLoss::Contrastive { temperature, .. } => {
                let z = project(&graph, store, &tokens)?.l2_normalize_rows();
                let sim = z.matmul(&z.permute(&[1, 0]));
                sim.contrastive_nll(temperature)
            }
            CheckLoss::Classification { .. } => {
                let probs = classify(&graph, store, &tokens)?;
                probs.bce_probs(target.as_ref().expect("classification target"))
            }
        };
        let out = value.value().iter().copied().next().expect("scalar loss");
        if !out.is_finite() {
            return Err(CoreError::NonFinite("gradient-check loss".to_string()));
        }
        Ok(out)
    };

    // One reverse-mode pass for the analytic gradients.
    let grads: IndexMap<String, ArrayD<f64>> = {
        let graph = Graph::<f64>::new();
        graph.set_train(true);
        let mut drop_rng = RngStream::from_seed(dropout_seed);
        let input = graph.constant(x.clone());
        let tokens = backbone_forward(&graph, &store, &input, config, &mut drop_rng)?;
        let value = match loss {
            CheckLoss::Contrastive { temperature, .. } => {
                let z = project(&graph, &mut store, &tokens)?.l2_normalize_rows();
                let sim = z.matmul(&z.permute(&[1, 0]));
                sim.contrastive_nll(temperature)
            }
            CheckLoss::Classification { .. } => {
                let probs = classify(&graph, &store, &tokens)?;
                probs.bce_probs(target.as_ref().expect("classification target"))
            }
        };
        graph.backward(&value)
    };
    for (name, g) in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!("gradient of {name}")));
        }
    }

    // Sample coordinates: one per gradient-bearing tensor, then uniformly.
    let mut coords: Vec<(String, usize)> = Vec::new();
    let mut pick_rng = RngStream::from_seed(seed).child(crate::rng::purpose::SAMPLE, &[0]);
    let names: Vec<String> = grads.keys().cloned().collect();
    for name in &names {
        let len = grads[name].len();
        coords.push((name.clone(), pick_rng.index(len)));
    }
    while coords.len() < min_samples {
        let name = &names[pick_rng.index(names.len())];
        coords.push((name.clone(), pick_rng.index(grads[name].len())));
    }

    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    for (name, idx) in &coords {
        let theta = store.get(name)?.value.as_slice().expect("standard layout")[*idx];
        let h = 1e-4 * theta.abs().max(1.0);
        store.value_mut(name)?.as_slice_mut().expect("standard layout")[*idx] = theta + h;
        let plus = eval_loss(&mut store)?;
        store.value_mut(name)?.as_slice_mut().expect("standard layout")[*idx] = theta - h;
        let minus = eval_loss(&mut store)?;
        store.value_mut(name)?.as_slice_mut().expect("standard layout")[*idx] = theta;

        let fd = (plus - minus) / (2.0 * h);
        let g = grads[name].as_slice().expect("standard layout")[*idx];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = format!("{name}[{idx}]");
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        n_sampled: coords.len(),
    })
}
