//! Weighted-accuracy scoring: weight-matrix validation and CSV round-trips,
//! binarization boundary rules, anchor scores, a hand-computed fixture, a
//! 500-instance brute-force comparison, structural invariants, and
//! mean ± deviation aggregation.

use std::collections::BTreeSet;

use ndarray::Array2;
use selfdana_core::metrics::{
    aggregate_report, binarize, cinc_score, write_scores_csv, write_summary_csv, ScoreReport,
    WeightMatrix, DEFAULT_THRESHOLD,
};
use selfdana_core::rng::{purpose, RngStream};

// ------------------------------------------------------------------- helpers

fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

/// Independent score computation: weighted contributions are summed directly
/// per recording (never materializing a confusion matrix), with sets built
/// through `BTreeSet` unions.
fn oracle_score(preds: &Array2<f64>, truths: &Array2<f64>, w: &Array2<f64>, normal: usize) -> f64 {
    let row_set = |m: &Array2<f64>, r: usize| -> BTreeSet<usize> {
        let set: BTreeSet<usize> = (0..m.ncols()).filter(|&k| m[(r, k)] == 1.0).collect();
        if set.is_empty() {
            BTreeSet::from([normal])
        } else {
            set
        }
    };
    let total = |pred_for: &dyn Fn(usize, &BTreeSet<usize>) -> BTreeSet<usize>| -> f64 {
        let mut s = 0.0;
        for r in 0..truths.nrows() {
            let g = row_set(truths, r);
            let p = pred_for(r, &g);
            let n = g.union(&p).count() as f64;
            for &gi in &g {
                for &pi in &p {
                    s += w[(gi, pi)] / n;
                }
            }
        }
        s
    };
    let s_observed = total(&|r, _| row_set(preds, r));
    let s_inactive = total(&|_, _| BTreeSet::from([normal]));
    let s_perfect = total(&|_, g| g.clone());
    if s_perfect == s_inactive {
        0.0
    } else {
        (s_observed - s_inactive) / (s_perfect - s_inactive)
    }
}

fn random_multi_hot(rng: &mut RngStream, b: usize, k: usize, density: f64) -> Array2<f64> {
    Array2::from_shape_fn((b, k), |_| (rng.uniform(0.0, 1.0) < density) as usize as f64)
}

fn random_weights(rng: &mut RngStream, k: usize) -> Array2<f64> {
    let mut w = Array2::from_shape_fn((k, k), |_| rng.uniform(0.0, 1.0));
    for i in 0..k {
        w[(i, i)] = 1.0;
    }
    w
}

// -------------------------------------------------------------- weight matrix

#[test]
fn weight_matrix_validation_catches_bad_inputs() {
    let cs = classes(3);
    assert!(WeightMatrix::identity(&cs, "c0").is_ok());
    assert!(WeightMatrix::identity(&cs, "zzz").is_err(), "unknown normal class");
    assert!(WeightMatrix::identity(&[], "c0").is_err(), "no classes");

    let mut dup = cs.clone();
    dup[2] = "c0".to_string();
    assert!(WeightMatrix::identity(&dup, "c0").is_err(), "duplicate class");

    let mut bad_diag = WeightMatrix::identity(&cs, "c0").unwrap();
    bad_diag.w[(1, 1)] = 0.9;
    assert!(bad_diag.validate().is_err(), "diagonal must be 1");

    let mut out_of_range = WeightMatrix::identity(&cs, "c0").unwrap();
    out_of_range.w[(0, 2)] = 1.5;
    assert!(out_of_range.validate().is_err(), "entries must stay in [0,1]");
}

#[test]
fn weight_matrix_csv_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.csv");
    let cs = classes(4);
    let mut rng = RngStream::from_seed(3).child(purpose::SYNTH, &[0]);
    let mut matrix = WeightMatrix::identity(&cs, "c2").unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                matrix.w[(i, j)] = (rng.uniform(0.0, 1.0) * 1000.0).round() / 1000.0;
            }
        }
    }
    matrix.to_csv(&path).unwrap();
    let back = WeightMatrix::from_csv(&path, "c2").unwrap();
    assert_eq!(back.classes, cs);
    assert_eq!(back.normal, "c2");
    for i in 0..4 {
        for j in 0..4 {
            assert!((back.w[(i, j)] - matrix.w[(i, j)]).abs() < 1e-12);
        }
    }

    let text = std::fs::read_to_string(&path).unwrap();
    let first_line = text.lines().next().unwrap();
    assert_eq!(first_line, ",c0,c1,c2,c3", "first row carries class codes");
    assert!(text.lines().nth(1).unwrap().starts_with("c0,"), "first column too");
}

#[test]
fn weight_matrix_csv_rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let jagged = dir.path().join("jagged.csv");
    std::fs::write(&jagged, ",a,b\na,1,0\nb,0\n").unwrap();
    assert!(WeightMatrix::from_csv(&jagged, "a").is_err());

    let bad_diag = dir.path().join("bad_diag.csv");
    std::fs::write(&bad_diag, ",a,b\na,1,0\nb,0,0.5\n").unwrap();
    assert!(WeightMatrix::from_csv(&bad_diag, "a").is_err());

    let relabeled = dir.path().join("relabel.csv");
    std::fs::write(&relabeled, ",a,b\nb,1,0\na,0,1\n").unwrap();
    assert!(WeightMatrix::from_csv(&relabeled, "a").is_err(), "row labels must match header order");
}

// -------------------------------------------------------------- binarization

#[test]
fn binarize_applies_the_at_least_rule() {
    let probs = Array2::from_shape_vec((2, 2), vec![0.5, 0.49, 0.51, 0.5]).unwrap();
    let out = binarize(&probs, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(out, Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 1.0]).unwrap());

    let low = Array2::from_elem((3, 4), 0.9);
    assert!(binarize(&low, 0.99).unwrap().iter().all(|&v| v == 0.0));

    let already = Array2::from_shape_vec((1, 4), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(binarize(&already, 0.5).unwrap(), already, "idempotent on 0/1");

    assert!(binarize(&low, 0.0).is_err());
    assert!(binarize(&low, 1.0).is_err());
}

// ------------------------------------------------------------------- anchors

#[test]
fn perfect_predictions_score_exactly_one() {
    let mut rng = RngStream::from_seed(11).child(purpose::SYNTH, &[1]);
    for trial in 0..10 {
        let k = 3 + trial % 3;
        let cs = classes(k);
        let mut matrix = WeightMatrix::identity(&cs, "c0").unwrap();
        matrix.w = random_weights(&mut rng, k);
        matrix.validate().unwrap();
        let truths = random_multi_hot(&mut rng, 20, k, 0.3);
        let score = cinc_score(&truths, &truths, &matrix).unwrap();
        assert!((score - 1.0).abs() < 1e-12, "trial {trial}: {score}");
    }
}

#[test]
fn always_normal_predictions_score_exactly_zero() {
    let mut rng = RngStream::from_seed(12).child(purpose::SYNTH, &[2]);
    let k = 4;
    let matrix = WeightMatrix::identity(&classes(k), "c1").unwrap();
    let truths = random_multi_hot(&mut rng, 30, k, 0.4);
    let mut preds = Array2::zeros((30, k));
    for r in 0..30 {
        preds[(r, 1)] = 1.0;
    }
    let score = cinc_score(&preds, &truths, &matrix).unwrap();
    assert!(score.abs() < 1e-12, "{score}");
}

#[test]
fn hand_fixture_two_recordings_scores_one_half() {
    // Identity weights over {A, B, N} with normal N. Truths {A} and {B};
    // both predictions {A}. The weighted-confusion entries are
    // a[A,A] = 1 (union size 1) and a[B,A] = 1/2 (union size 2), so the
    // observed sum is 1, the always-normal sum 0, the perfect sum 2.
    let cs: Vec<String> = ["A", "B", "N"].iter().map(|s| s.to_string()).collect();
    let matrix = WeightMatrix::identity(&cs, "N").unwrap();
    let truths = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let preds = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let score = cinc_score(&preds, &truths, &matrix).unwrap();
    assert!((score - 0.5).abs() < 1e-12, "{score}");
}

#[test]
fn all_normal_truths_degenerate_to_zero() {
    // Perfect and always-normal references coincide, so the normalization
    // is undefined and the score is 0 by convention.
    let k = 3;
    let matrix = WeightMatrix::identity(&classes(k), "c0").unwrap();
    let mut truths = Array2::zeros((5, k));
    for r in 0..5 {
        truths[(r, 0)] = 1.0;
    }
    let mut preds = Array2::zeros((5, k));
    for r in 0..5 {
        preds[(r, 2)] = 1.0;
    }
    assert_eq!(cinc_score(&preds, &truths, &matrix).unwrap(), 0.0);
}

// ------------------------------------------------------------ oracle and laws

#[test]
fn five_hundred_random_instances_match_the_brute_force_oracle() {
    let mut rng = RngStream::from_seed(500).child(purpose::SYNTH, &[3]);
    for trial in 0..500 {
        let k = 3 + rng.index(4);
        let b = 1 + rng.index(40);
        let normal = rng.index(k);
        let cs = classes(k);
        let mut matrix = WeightMatrix::identity(&cs, &cs[normal]).unwrap();
        matrix.w = random_weights(&mut rng, k);
        let density = rng.uniform(0.1, 0.6);
        let truths = random_multi_hot(&mut rng, b, k, density);
        let preds = random_multi_hot(&mut rng, b, k, density);
        let got = cinc_score(&preds, &truths, &matrix).unwrap();
        let want = oracle_score(&preds, &truths, &matrix.w, normal);
        assert!(
            (got - want).abs() <= 1e-9,
            "trial {trial}: {got} vs oracle {want}"
        );
    }
}

#[test]
fn identity_weights_single_label_reduce_to_normalized_accuracy() {
    let mut rng = RngStream::from_seed(42).child(purpose::SYNTH, &[4]);
    for trial in 0..50 {
        let k = 3 + rng.index(3);
        let b = 5 + rng.index(30);
        let normal = rng.index(k);
        let matrix = WeightMatrix::identity(&classes(k), &format!("c{normal}")).unwrap();
        let mut truths = Array2::zeros((b, k));
        let mut preds = Array2::zeros((b, k));
        for r in 0..b {
            truths[(r, rng.index(k))] = 1.0;
            preds[(r, rng.index(k))] = 1.0;
        }
        let correct = (0..b)
            .filter(|&r| (0..k).all(|c| truths[(r, c)] == preds[(r, c)]))
            .count() as f64;
        let normal_truths = (0..b).filter(|&r| truths[(r, normal)] == 1.0).count() as f64;
        let accuracy = correct / b as f64;
        let inactive = normal_truths / b as f64;
        let score = cinc_score(&preds, &truths, &matrix).unwrap();
        if (1.0 - inactive).abs() < 1e-12 {
            assert_eq!(score, 0.0, "all-normal truths degenerate");
        } else {
            let want = (accuracy - inactive) / (1.0 - inactive);
            assert!((score - want).abs() <= 1e-9, "trial {trial}: {score} vs {want}");
        }
    }
}

#[test]
fn score_is_invariant_to_recording_order() {
    let mut rng = RngStream::from_seed(7).child(purpose::SYNTH, &[5]);
    let k = 5;
    let b = 25;
    let cs = classes(k);
    let mut matrix = WeightMatrix::identity(&cs, "c4").unwrap();
    matrix.w = random_weights(&mut rng, k);
    let truths = random_multi_hot(&mut rng, b, k, 0.35);
    let preds = random_multi_hot(&mut rng, b, k, 0.35);
    let base = cinc_score(&preds, &truths, &matrix).unwrap();

    let mut order: Vec<usize> = (0..b).collect();
    rng.shuffle(&mut order);
    let pick = |m: &Array2<f64>| {
        Array2::from_shape_fn((b, k), |(r, c)| m[(order[r], c)])
    };
    let shuffled = cinc_score(&pick(&preds), &pick(&truths), &matrix).unwrap();
    assert!((base - shuffled).abs() < 1e-12, "{base} vs {shuffled}");
}

#[test]
fn breaking_a_correct_prediction_never_raises_the_score() {
    let mut rng = RngStream::from_seed(88).child(purpose::SYNTH, &[6]);
    for trial in 0..30 {
        let k = 4;
        let b = 12;
        let matrix = WeightMatrix::identity(&classes(k), "c0").unwrap();
        let mut truths = Array2::zeros((b, k));
        let mut preds = Array2::zeros((b, k));
        for r in 0..b {
            let g = rng.index(k);
            truths[(r, g)] = 1.0;
            // Mostly correct predictions so a correct one always exists.
            let p = if rng.uniform(0.0, 1.0) < 0.8 { g } else { rng.index(k) };
            preds[(r, p)] = 1.0;
        }
        let correct_row = (0..b).find(|&r| {
            (0..k).all(|c| truths[(r, c)] == preds[(r, c)])
        });
        let Some(row) = correct_row else { continue };
        let before = cinc_score(&preds, &truths, &matrix).unwrap();
        let truth_class = (0..k).find(|&c| truths[(row, c)] == 1.0).unwrap();
        let wrong = (truth_class + 1 + rng.index(k - 1)) % k;
        let mut flipped = preds.clone();
        flipped[(row, truth_class)] = 0.0;
        flipped[(row, wrong)] = 1.0;
        let after = cinc_score(&flipped, &truths, &matrix).unwrap();
        assert!(after <= before + 1e-12, "trial {trial}: {before} -> {after}");
    }
}

#[test]
fn score_rejects_malformed_inputs() {
    let matrix = WeightMatrix::identity(&classes(3), "c0").unwrap();
    let ok = Array2::zeros((2, 3));
    let non_binary = Array2::from_elem((2, 3), 0.5);
    assert!(cinc_score(&non_binary, &ok, &matrix).is_err());
    let wrong_cols = Array2::zeros((2, 4));
    assert!(cinc_score(&wrong_cols, &wrong_cols, &matrix).is_err());
    let mismatched = Array2::zeros((3, 3));
    assert!(cinc_score(&ok, &mismatched, &matrix).is_err());
}

// ---------------------------------------------------------------- aggregation

#[test]
fn aggregate_report_computes_mean_and_sample_deviation() {
    let same = aggregate_report(&[0.6, 0.6, 0.6], "exp", "12").unwrap();
    assert!((same.mean - 0.6).abs() < 1e-12);
    assert_eq!(same.std, 0.0);

    let pair = aggregate_report(&[0.59, 0.61], "exp", "12").unwrap();
    assert!((pair.mean - 0.6).abs() < 1e-12);
    assert!((pair.std - 0.014142135623730963).abs() < 1e-12);
    assert_eq!(format!("{:.3}", pair.std), "0.014");

    let single = aggregate_report(&[0.42], "exp", "6").unwrap();
    assert_eq!(single.std, 0.0);
    assert_eq!(single.mean, 0.42);

    assert!(aggregate_report(&[], "exp", "12").is_err());
}

#[test]
fn report_csvs_use_the_documented_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let reports = vec![
        ScoreReport {
            experiment: "self_dana".to_string(),
            leadset: "3".to_string(),
            scores: vec![0.5, 0.52],
            mean: 0.51,
            std: 0.014142135623730963,
        },
        ScoreReport {
            experiment: "supervised".to_string(),
            leadset: "3".to_string(),
            scores: vec![0.4],
            mean: 0.4,
            std: 0.0,
        },
    ];
    let scores_path = dir.path().join("scores.csv");
    let summary_path = dir.path().join("summary.csv");
    write_scores_csv(&scores_path, &reports).unwrap();
    write_summary_csv(&summary_path, &reports).unwrap();

    let scores = std::fs::read_to_string(&scores_path).unwrap();
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines[0], "experiment,leadset,seed,score");
    assert_eq!(lines.len(), 4, "one row per seed");
    assert!(lines[1].starts_with("self_dana,3,0,"));
    assert!(lines[3].starts_with("supervised,3,0,"));

    let summary = std::fs::read_to_string(&summary_path).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "experiment,leadset,mean,std");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("0.510000"));
}
