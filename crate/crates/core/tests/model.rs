//! Encoder integration tests: parameter accounting, shape laws,
//! channel-permutation invariance, the zero-padding baseline, checkpoint
//! round-trips, the optimizer update rule, and gradient checks.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use selfdana_core::model::{
    backbone_forward, classify, count_parameters, feature_encoder_forward, gradient_check,
    init_params, load_checkpoint, project, save_checkpoint, zero_pad_batch, zero_pad_window,
    AdamConfig, AdamState, CheckLoss, ModelConfig, ParameterStore,
};
use selfdana_core::rng::purpose;
use selfdana_core::signal_io::LeadId;
use selfdana_core::tensor::Graph;
use selfdana_core::RngStream;

fn tiny() -> ModelConfig {
    ModelConfig::tiny()
}

fn tiny_store_f32(seed: u64, n_classes: Option<usize>) -> ParameterStore<f32> {
    let mut rng = RngStream::from_seed(seed).child(purpose::INIT, &[0]);
    init_params(&tiny(), n_classes, &mut rng).expect("init")
}

fn random_input_f32(rng: &mut RngStream, b: usize, c: usize, t: usize) -> ArrayD<f32> {
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[b, c, t]));
    for v in x.iter_mut() {
        *v = rng.normal(0.0, 1.0) as f32;
    }
    x
}

// ----------------------------------------------------- parameter accounting

#[test]
fn full_preset_parameter_counts_are_exact() {
    let counts = count_parameters(&ModelConfig::full(), Some(23)).expect("count");
    assert_eq!(counts.backbone, 90_367_616);
    assert_eq!(counts.projection_head, 197_376);
    assert_eq!(counts.total_with_projection, 90_564_992);
    assert_eq!(counts.classification_head, Some(17_687));
}

#[test]
fn tiny_preset_parameter_counts_match_frozen_audit() {
    // Frozen by a hand audit of the layer dimensions: conv stages 32 + 1536,
    // group norm 32, pre-layer-norm 32, embed 1088, positional conv
    // 64*4*8 + 8 + 64 = 2120, positional layer norm 128, and two blocks of
    // 49 984 = 4*(64*64+64) + 128 + (256*64+256) + (64*256+64) + 128.
    let counts = count_parameters(&tiny(), Some(4)).expect("count");
    assert_eq!(counts.backbone, 104_936);
    assert_eq!(counts.projection_head, 2_144);
    assert_eq!(counts.total_with_projection, 107_080);
    assert_eq!(counts.classification_head, Some(4 * 64 + 4));
}

#[test]
fn analytic_counts_agree_with_instantiated_tensors() {
    for (config, classes) in [(tiny(), None), (tiny(), Some(7)), (ModelConfig::full(), Some(23))] {
        let counts = count_parameters(&config, classes).expect("count");
        // Instantiating the full preset allocates ~360 MB; f32 keeps it sane.
        let mut rng = RngStream::from_seed(11).child(purpose::INIT, &[0]);
        let store = init_params::<f32>(&config, classes, &mut rng).expect("init");
        let expected = counts.total_with_projection
            + counts.classification_head.unwrap_or(0);
        assert_eq!(store.n_scalars(true), expected);
        // Running statistics are buffers, not parameters.
        assert_eq!(
            store.n_scalars(false) - store.n_scalars(true),
            2 * config.proj_dim
        );
        let component_sum: usize = counts.components.iter().map(|(_, n)| n).sum();
        assert_eq!(component_sum, counts.backbone);
    }
}

// ---------------------------------------------------------------- shape laws

#[test]
fn full_preset_conv_stages_halve_2500_down_to_156() {
    let config = ModelConfig::full();
    // Stage-by-stage shape observation through the public conv op, using
    // the encoder's own weights.
    let mut rng = RngStream::from_seed(3).child(purpose::INIT, &[0]);
    let store = init_params::<f32>(&config, None, &mut rng).expect("init");
    let graph = Graph::<f32>::new();
    let mut data = RngStream::from_seed(4).child(purpose::SYNTH, &[0]);
    let x = graph.constant(random_input_f32(&mut data, 1, 12, 2500));

    let mut h = x
        .reshape(&[1, 1, 12, 2500])
        .conv_time_k2s2(&store.leaf(&graph, "conv1.weight").unwrap());
    assert_eq!(h.value().shape(), [1, 256, 12, 1250]);
    h = h
        .group_norm(
            &store.leaf(&graph, "gn1.gamma").unwrap(),
            &store.leaf(&graph, "gn1.beta").unwrap(),
            256,
            config.norm_eps,
        )
        .gelu();
    let expect = [625usize, 312, 156];
    for (i, want) in (2..=4).zip(expect) {
        h = h
            .conv_time_k2s2(&store.leaf(&graph, &format!("conv{i}.weight")).unwrap())
            .gelu();
        assert_eq!(h.value().shape(), [1, 256, 12, want]);
    }

    // The packaged encoder front-end lands on the same final shape.
    let enc = feature_encoder_forward(&graph, &store, &x, &config).expect("encoder");
    assert_eq!(enc.value().shape(), [1, 256, 12, 156]);
}

#[test]
fn full_preset_emits_156_by_768_tokens_for_a_12_lead_window() {
    let config = ModelConfig::full();
    let mut rng = RngStream::from_seed(5).child(purpose::INIT, &[0]);
    let store = init_params::<f32>(&config, None, &mut rng).expect("init");
    let graph = Graph::<f32>::new();
    graph.set_grad_enabled(false);
    let mut data = RngStream::from_seed(6).child(purpose::SYNTH, &[0]);
    let x = graph.constant(random_input_f32(&mut data, 1, 12, 2500));
    let mut drop = RngStream::from_seed(7);
    let tokens = backbone_forward(&graph, &store, &x, &config, &mut drop).expect("forward");
    assert_eq!(tokens.value().shape(), [1, 156, 768]);
    assert!(tokens.value().iter().all(|v| v.is_finite()));
}

#[test]
fn token_count_is_independent_of_channel_count() {
    let config = tiny();
    let store = tiny_store_f32(8, None);
    let graph = Graph::<f32>::new();
    graph.set_grad_enabled(false);
    let mut data = RngStream::from_seed(9).child(purpose::SYNTH, &[0]);
    let mut drop = RngStream::from_seed(10);
    for c in [1usize, 2, 3, 6, 12] {
        let x = graph.constant(random_input_f32(&mut data, 2, c, config.nominal_t));
        let tokens = backbone_forward(&graph, &store, &x, &config, &mut drop).expect("forward");
        assert_eq!(
            tokens.value().shape(),
            [2, config.dap_out_len, config.embed_dim],
            "channel count {c} changed the token shape"
        );
    }
}

#[test]
fn backbone_rejects_bad_inputs() {
    let config = tiny();
    let store = tiny_store_f32(12, None);
    let graph = Graph::<f32>::new();
    let mut drop = RngStream::from_seed(13);

    let too_many = graph.constant(ArrayD::<f32>::zeros(IxDyn(&[1, 13, 192])));
    assert!(backbone_forward(&graph, &store, &too_many, &config, &mut drop).is_err());

    let too_short = graph.constant(ArrayD::<f32>::zeros(IxDyn(&[1, 2, 8])));
    assert!(backbone_forward(&graph, &store, &too_short, &config, &mut drop).is_err());

    let mut bad = ArrayD::<f32>::zeros(IxDyn(&[1, 2, 192]));
    bad[[0, 0, 5]] = f32::NAN;
    let non_finite = graph.constant(bad);
    assert!(backbone_forward(&graph, &store, &non_finite, &config, &mut drop).is_err());
}

#[test]
fn eval_mode_forward_is_deterministic() {
    let config = tiny();
    let store = tiny_store_f32(14, None);
    let graph = Graph::<f32>::new();
    graph.set_grad_enabled(false);
    let mut data = RngStream::from_seed(15).child(purpose::SYNTH, &[0]);
    let x = graph.constant(random_input_f32(&mut data, 3, 4, 192));
    let mut d1 = RngStream::from_seed(16);
    let mut d2 = RngStream::from_seed(99);
    let a = backbone_forward(&graph, &store, &x, &config, &mut d1).expect("forward");
    let b = backbone_forward(&graph, &store, &x, &config, &mut d2).expect("forward");
    assert_eq!(a.value().as_slice().unwrap(), b.value().as_slice().unwrap());
}

// ------------------------------------------------ channel-order invariance

#[test]
fn permuting_input_channels_leaves_tokens_unchanged() {
    let config = tiny();
    let store = tiny_store_f32(17, None);
    let graph = Graph::<f32>::new();
    graph.set_grad_enabled(false);
    let mut data = RngStream::from_seed(18).child(purpose::SYNTH, &[0]);
    let mut drop = RngStream::from_seed(19);

    let base = random_input_f32(&mut data, 2, 6, 192);
    let reference = backbone_forward(&graph, &store, &graph.constant(base.clone()), &config, &mut drop)
        .expect("forward");

    let mut perm_rng = RngStream::from_seed(20).child(purpose::SAMPLE, &[0]);
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..6).collect();
        perm_rng.shuffle(&mut order);
        let mut permuted = base.clone();
        for (dst, &src) in order.iter().enumerate() {
            permuted
                .slice_mut(ndarray::s![.., dst, ..])
                .assign(&base.slice(ndarray::s![.., src, ..]));
        }
        let out = backbone_forward(&graph, &store, &graph.constant(permuted), &config, &mut drop)
            .expect("forward");
        let max_abs = reference
            .value()
            .iter()
            .zip(out.value().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(
            max_abs <= 1e-5,
            "channel permutation changed output by {max_abs}"
        );
    }
}

// ------------------------------------------------------ zero-pad baseline

#[test]
fn zero_pad_places_rows_at_canonical_positions() {
    let t = 40;
    let mut x = Array2::<f32>::zeros((1, t));
    x.row_mut(0).fill(2.5);
    let padded = zero_pad_window(&x, &[LeadId::I]).expect("pad");
    assert_eq!(padded.dim(), (12, t));
    assert!(padded.row(0).iter().all(|&v| v == 2.5));
    for r in 1..12 {
        assert!(padded.row(r).iter().all(|&v| v == 0.0), "row {r} not zero");
    }

    // Rows arrive in request order but land at canonical positions.
    let mut y = Array2::<f32>::zeros((3, t));
    y.row_mut(0).fill(1.0); // II  -> position 1
    y.row_mut(1).fill(2.0); // I   -> position 0
    y.row_mut(2).fill(3.0); // V2  -> position 7
    let padded = zero_pad_window(&y, &[LeadId::II, LeadId::I, LeadId::V2]).expect("pad");
    assert_eq!(padded[(1, 0)], 1.0);
    assert_eq!(padded[(0, 0)], 2.0);
    assert_eq!(padded[(7, 0)], 3.0);
    let abs_in: f32 = y.iter().map(|v| v.abs()).sum();
    let abs_out: f32 = padded.iter().map(|v| v.abs()).sum();
    assert_eq!(abs_in, abs_out);
}

#[test]
fn zero_pad_rejects_duplicates_and_row_mismatch() {
    let x = Array2::<f32>::zeros((2, 10));
    let err = zero_pad_window(&x, &[LeadId::I, LeadId::I]).unwrap_err();
    assert!(err.to_string().contains("duplicate"));
    assert!(zero_pad_window(&x, &[LeadId::I]).is_err());
}

#[test]
fn twelve_lead_zero_padding_is_the_identity_through_the_backbone() {
    let config = tiny();
    let store = tiny_store_f32(21, None);
    let graph = Graph::<f32>::new();
    graph.set_grad_enabled(false);
    let mut data = RngStream::from_seed(22).child(purpose::SYNTH, &[0]);
    let mut drop = RngStream::from_seed(23);

    let base3 = {
        let x = random_input_f32(&mut data, 2, 12, 192);
        Array3::from_shape_vec((2, 12, 192), x.into_raw_vec_and_offset().0).unwrap()
    };
    let padded = zero_pad_batch(&base3, &LeadId::ALL).expect("pad");
    assert_eq!(padded, base3);

    let direct = backbone_forward(
        &graph,
        &store,
        &graph.constant(base3.clone().into_dyn()),
        &config,
        &mut drop,
    )
    .expect("forward");
    let via_pad = backbone_forward(
        &graph,
        &store,
        &graph.constant(padded.into_dyn()),
        &config,
        &mut drop,
    )
    .expect("forward");
    let max_abs = direct
        .value()
        .iter()
        .zip(via_pad.value().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_abs <= 1e-6, "12-lead padding changed output by {max_abs}");
}

// ------------------------------------------------------------------- heads

#[test]
fn projection_head_uses_batch_stats_in_train_and_running_stats_in_eval() {
    let config = tiny();
    let mut store = tiny_store_f32(24, None);
    let mut data = RngStream::from_seed(25).child(purpose::SYNTH, &[0]);
    let tokens_arr = random_input_f32(&mut data, 4, config.dap_out_len, config.embed_dim);

    // Train mode: outputs are standardized by batch statistics, so each
    // column has mean ~0 and unit variance under the default affine.
    let graph = Graph::<f32>::new();
    graph.set_train(true);
    let tokens = graph.constant(tokens_arr.clone());
    let z = project(&graph, &mut store, &tokens).expect("project");
    let zv = z.value();
    let z2 = zv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    for col in z2.columns() {
        let mean: f32 = col.iter().sum::<f32>() / col.len() as f32;
        assert!(mean.abs() < 1e-4, "train-mode column mean {mean}");
    }

    // The running statistics moved away from their (0, 1) start.
    let rm = store.get("project_bn.running_mean").unwrap().value.clone();
    assert!(rm.iter().any(|&v| v != 0.0));

    // Eval mode with the default running stats is a pure affine map; batch
    // size one is fine there.
    let mut store_eval = tiny_store_f32(24, None);
    let graph_eval = Graph::<f32>::new();
    graph_eval.set_grad_enabled(false);
    let one = graph_eval.constant(tokens_arr.slice(ndarray::s![0..1, .., ..]).to_owned().into_dyn());
    assert!(project(&graph_eval, &mut store_eval, &one).is_ok());

    // Train mode with a single row is rejected (batch statistics undefined).
    let graph_one = Graph::<f32>::new();
    graph_one.set_train(true);
    let one_train = graph_one.constant(tokens_arr.slice(ndarray::s![0..1, .., ..]).to_owned().into_dyn());
    assert!(project(&graph_one, &mut store, &one_train).is_err());
}

#[test]
fn classification_head_returns_probabilities() {
    let config = tiny();
    let mut store = tiny_store_f32(26, Some(5));
    let graph = Graph::<f32>::new();
    graph.set_grad_enabled(false);
    let mut data = RngStream::from_seed(27).child(purpose::SYNTH, &[0]);
    let tokens = graph.constant(random_input_f32(&mut data, 3, config.dap_out_len, config.embed_dim));
    let probs = classify(&graph, &store, &tokens).expect("classify");
    assert_eq!(probs.value().shape(), [3, 5]);
    assert!(probs.value().iter().all(|&p| p > 0.0 && p < 1.0));

    // Zero weights and bias pin every output at exactly sigmoid(0) = 0.5.
    store
        .set_value("classify.weight", ArrayD::zeros(IxDyn(&[5, 64])))
        .unwrap();
    store
        .set_value("classify.bias", ArrayD::zeros(IxDyn(&[5])))
        .unwrap();
    let probs = classify(&graph, &store, &tokens).expect("classify");
    assert!(probs.value().iter().all(|&p| p == 0.5));
}

// ------------------------------------------------------------ initialization

#[test]
fn initialization_is_deterministic_and_head_independent() {
    let a = tiny_store_f32(31, None);
    let b = tiny_store_f32(31, None);
    for (name, entry) in a.iter() {
        assert_eq!(
            entry.value.as_slice().unwrap(),
            b.get(name).unwrap().value.as_slice().unwrap(),
            "{name} differs across identical seeds"
        );
    }

    // Adding a classification head must not disturb the shared tensors.
    let with_head = tiny_store_f32(31, Some(9));
    for (name, entry) in a.iter() {
        assert_eq!(
            entry.value.as_slice().unwrap(),
            with_head.get(name).unwrap().value.as_slice().unwrap(),
            "{name} depends on the optional head"
        );
    }
    assert!(with_head.get("classify.weight").is_ok());
    assert!(a.get("classify.weight").is_err());

    let c = tiny_store_f32(32, None);
    let same = a
        .iter()
        .all(|(name, e)| c.get(name).unwrap().value.as_slice() == e.value.as_slice());
    assert!(!same, "different seeds produced identical parameters");
}

#[test]
fn positional_conv_gain_starts_at_the_per_tap_direction_norm() {
    let store = tiny_store_f32(33, None);
    let v = store.get("pos_conv.v").unwrap().value.clone();
    let g = store.get("pos_conv.g").unwrap().value.clone();
    for k in 0..g.len() {
        let norm: f32 = v
            .slice(ndarray::s![.., .., k])
            .iter()
            .map(|x| x * x)
            .sum::<f32>()
            .sqrt();
        let gk = g.as_slice().unwrap()[k];
        assert!((norm - gk).abs() <= 1e-6 * norm.max(1.0), "tap {k}: {norm} vs {gk}");
    }
}

// ------------------------------------------------------------- checkpoints

#[test]
fn checkpoint_round_trip_is_bit_exact_including_optimizer_state() {
    let config = tiny();
    let mut store = tiny_store_f32(41, Some(4));
    let mut adam = AdamState::new(AdamConfig::default(), &store);

    // One real update so moments and step count are non-trivial.
    let mut grads = indexmap::IndexMap::new();
    for (name, entry) in store.iter() {
        if entry.trainable {
            grads.insert(name.to_string(), ArrayD::from_elem(entry.value.raw_dim(), 0.01f32));
        }
    }
    adam.step(&mut store, &grads, 1e-3).expect("step");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let echo = serde_json::to_value(&config).unwrap();
    save_checkpoint(&path, &store, &echo, Some(&adam)).expect("save");

    let (loaded, echo2, adam2) = load_checkpoint::<f32>(&path).expect("load");
    assert_eq!(echo, echo2);
    assert_eq!(loaded.len(), store.len());
    for (name, entry) in store.iter() {
        let other = loaded.get(name).expect("name preserved");
        assert_eq!(entry.trainable, other.trainable);
        assert_eq!(
            entry.value.as_slice().unwrap(),
            other.value.as_slice().unwrap(),
            "{name} not bit-exact"
        );
    }
    let adam2 = adam2.expect("optimizer state");
    assert_eq!(adam2.step_count(), 1);
    for (name, entry) in store.iter() {
        if entry.trainable {
            let (m1, v1) = adam.moments(name).unwrap();
            let (m2, v2) = adam2.moments(name).unwrap();
            assert_eq!(m1.as_slice().unwrap(), m2.as_slice().unwrap());
            assert_eq!(v1.as_slice().unwrap(), v2.as_slice().unwrap());
        }
    }

    // Ordering is preserved exactly.
    let names1: Vec<_> = store.names().collect();
    let names2: Vec<_> = loaded.names().collect();
    assert_eq!(names1, names2);
}

#[test]
fn checkpoint_rejects_wrong_dtype_magic_and_truncation() {
    let store = tiny_store_f32(42, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &store, &serde_json::json!({}), None).expect("save");

    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(err.to_string().contains("dtype"), "got: {err}");

    let bytes = std::fs::read(&path).unwrap();
    let bad_magic = dir.path().join("bad.ckpt");
    let mut corrupted = bytes.clone();
    corrupted[0] = b'X';
    std::fs::write(&bad_magic, &corrupted).unwrap();
    assert!(load_checkpoint::<f32>(&bad_magic).is_err());

    let truncated = dir.path().join("short.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 7]).unwrap();
    assert!(load_checkpoint::<f32>(&truncated).is_err());

    let trailing = dir.path().join("long.ckpt");
    let mut extended = bytes;
    extended.push(0);
    std::fs::write(&trailing, &extended).unwrap();
    assert!(load_checkpoint::<f32>(&trailing).is_err());
}

// ---------------------------------------------------------------- optimizer

#[test]
fn adam_single_step_matches_hand_computed_update() {
    // One parameter w = 1.0, gradient 0.5, lr = 1e-3, defaults
    // beta1 = 0.9, beta2 = 0.999, eps = 1e-8:
    //   m1 = 0.05, v1 = 0.00025, m̂ = 0.5, v̂ = 0.25,
    //   w ← 1 − 1e-3 · 0.5 / (0.5 + 1e-8).
    let mut store = ParameterStore::<f64>::new();
    store
        .insert("w", ArrayD::from_elem(IxDyn(&[1]), 1.0f64), true)
        .unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &store);
    let mut grads = indexmap::IndexMap::new();
    grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[1]), 0.5f64));
    adam.step(&mut store, &grads, 1e-3).unwrap();

    let expected1 = 1.0 - 1e-3 * 0.5 / (0.25f64.sqrt() + 1e-8);
    let w = store.get("w").unwrap().value.as_slice().unwrap()[0];
    assert!((w - expected1).abs() < 1e-15, "{w} vs {expected1}");
    let (m, v) = adam.moments("w").unwrap();
    assert!((m.as_slice().unwrap()[0] - 0.05).abs() < 1e-15);
    assert!((v.as_slice().unwrap()[0] - 0.00025).abs() < 1e-18);

    // Second step with gradient 0.25.
    grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[1]), 0.25f64));
    adam.step(&mut store, &grads, 1e-3).unwrap();
    let m2 = 0.9 * 0.05 + 0.1 * 0.25;
    let v2 = 0.999 * 0.00025 + 0.001 * 0.0625;
    let m_hat = m2 / (1.0 - 0.9f64.powi(2));
    let v_hat = v2 / (1.0 - 0.999f64.powi(2));
    let expected2 = expected1 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
    let w = store.get("w").unwrap().value.as_slice().unwrap()[0];
    assert!((w - expected2).abs() < 1e-15, "{w} vs {expected2}");
    assert_eq!(adam.step_count(), 2);
}

#[test]
fn adam_skips_parameters_without_gradients() {
    let mut store = ParameterStore::<f32>::new();
    store
        .insert("a", ArrayD::from_elem(IxDyn(&[2]), 1.0f32), true)
        .unwrap();
    store
        .insert("b", ArrayD::from_elem(IxDyn(&[2]), 2.0f32), true)
        .unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &store);
    let mut grads = indexmap::IndexMap::new();
    grads.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
    adam.step(&mut store, &grads, 1e-2).unwrap();
    assert!(store.get("a").unwrap().value.as_slice().unwrap()[0] < 1.0);
    assert_eq!(store.get("b").unwrap().value.as_slice().unwrap(), &[2.0, 2.0]);

    // Unknown name and shape mismatch are rejected.
    let mut bad = indexmap::IndexMap::new();
    bad.insert("zzz".to_string(), ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
    assert!(adam.step(&mut store, &bad, 1e-2).is_err());
    let mut wrong = indexmap::IndexMap::new();
    wrong.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[3]), 1.0f32));
    assert!(adam.step(&mut store, &wrong, 1e-2).is_err());
}

// ------------------------------------------------------------ gradient flow

#[test]
fn every_parameter_receives_gradient_from_some_head() {
    let config = tiny();
    let mut rng = RngStream::from_seed(51).child(purpose::INIT, &[0]);
    let mut store = init_params::<f32>(&config, Some(3), &mut rng).expect("init");
    let mut data = RngStream::from_seed(52).child(purpose::SYNTH, &[0]);
    let x = random_input_f32(&mut data, 4, 2, config.nominal_t);

    // Contrastive path: backbone + projection head.
    let contrastive_grads = {
        let graph = Graph::<f32>::new();
        graph.set_train(true);
        let mut drop = RngStream::from_seed(53);
        let input = graph.constant(x.clone());
        let tokens = backbone_forward(&graph, &store, &input, &config, &mut drop).unwrap();
        let z = project(&graph, &mut store, &tokens).unwrap().l2_normalize_rows();
        let sim = z.matmul(&z.permute(&[1, 0]));
        let loss = sim.contrastive_nll(0.5);
        graph.backward(&loss)
    };
    // Classification path: backbone + classification head.
    let classify_grads = {
        let graph = Graph::<f32>::new();
        graph.set_train(true);
        let mut drop = RngStream::from_seed(54);
        let input = graph.constant(x.clone());
        let tokens = backbone_forward(&graph, &store, &input, &config, &mut drop).unwrap();
        let probs = classify(&graph, &store, &tokens).unwrap();
        let mut target = ArrayD::<f32>::zeros(IxDyn(&[4, 3]));
        target[[0, 0]] = 1.0;
        target[[2, 1]] = 1.0;
        let loss = probs.bce_probs(&target);
        graph.backward(&loss)
    };

    for (name, entry) in store.iter() {
        if !entry.trainable {
            continue;
        }
        let g = contrastive_grads
            .get(name)
            .or_else(|| classify_grads.get(name))
            .unwrap_or_else(|| panic!("{name} received no gradient from either head"));
        assert!(
            g.iter().any(|&v| v != 0.0),
            "{name} gradient is identically zero"
        );
        assert!(g.iter().all(|v| v.is_finite()), "{name} gradient not finite");
    }
}

// ------------------------------------------------------------ gradient check

#[test]
fn finite_differences_confirm_contrastive_gradients() {
    let report = gradient_check(
        &tiny(),
        CheckLoss::Contrastive {
            n_pairs: 4,
            temperature: 0.5,
        },
        61,
        60,
    )
    .expect("gradient check");
    assert!(report.n_sampled >= 60);
    assert!(
        report.max_rel_err <= 1e-3,
        "contrastive max rel err {} at {}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn finite_differences_confirm_classification_gradients() {
    let report = gradient_check(
        &tiny(),
        CheckLoss::Classification {
            batch: 4,
            n_classes: 5,
        },
        62,
        60,
    )
    .expect("gradient check");
    assert!(report.n_sampled >= 60);
    assert!(
        report.max_rel_err <= 1e-3,
        "classification max rel err {} at {}",
        report.max_rel_err,
        report.worst
    );
}
