//! Challenge-style weighted accuracy for multi-label ECG classification:
//! pluggable class-similarity weight matrix, probability binarization, the
//! score itself, and per-experiment aggregation across seeds.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

// ------------------------------------------------------------- weight matrix

/// K×K class-similarity weights with unit diagonal, the class code order
/// shared by every score input, and the designated normal class.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub w: Array2<f64>,
    pub classes: Vec<String>,
    pub normal: String,
}

impl WeightMatrix {
    /// Identity weights: full credit for exact classes, none otherwise.
    pub fn identity(classes: &[String], normal: &str) -> Result<Self> {
        let k = classes.len();
        let matrix = Self {
            w: Array2::eye(k),
            classes: classes.to_vec(),
            normal: normal.to_string(),
        };
        matrix.validate()?;
        Ok(matrix)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k == 0 {
            return Err(CoreError::validation("weight matrix needs at least one class".to_string()));
        }
        if self.w.shape() != [k, k] {
            return Err(CoreError::validation(format!(
                "weight matrix is {:?} for {k} classes",
                self.w.shape()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.classes {
            if c.is_empty() {
                return Err(CoreError::validation("empty class code".to_string()));
            }
            if !seen.insert(c.clone()) {
                return Err(CoreError::validation(format!("duplicate class code {c}")));
            }
        }
        if !self.classes.iter().any(|c| c == &self.normal) {
            return Err(CoreError::validation(format!(
                "normal class {} is not in the class list",
                self.normal
            )));
        }
        for i in 0..k {
            if (self.w[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(CoreError::validation(format!(
                    "diagonal entry ({i},{i}) is {}, expected 1",
                    self.w[(i, i)]
                )));
            }
            for j in 0..k {
                let v = self.w[(i, j)];
                if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                    return Err(CoreError::validation(format!(
                        "weight ({i},{j}) = {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn normal_index(&self) -> usize {
        self.classes
            .iter()
            .position(|c| c == &self.normal)
            .expect("validated: normal class present")
    }

    pub fn class_index(&self, code: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| CoreError::validation(format!("class code {code} absent from weight matrix")))
    }

    /// CSV layout: first row and first column carry the class codes; cell
    /// (i, j) of the body is `W[i, j]`. The top-left corner cell is ignored.
    pub fn from_csv(path: &Path, normal: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
        let mut rows: Vec<Vec<String>> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
            rows.push(record.iter().map(|s| s.trim().to_string()).collect());
        }
        if rows.len() < 2 {
            return Err(CoreError::validation(format!(
                "{}: weight matrix CSV needs a header row and at least one class row",
                path.display()
            )));
        }
        let classes: Vec<String> = rows[0][1..].to_vec();
        let k = classes.len();
        if rows.len() != k + 1 {
            return Err(CoreError::validation(format!(
                "{}: {k} classes in the header but {} body rows",
                path.display(),
                rows.len() - 1
            )));
        }
        let mut w = Array2::<f64>::zeros((k, k));
        for (i, row) in rows[1..].iter().enumerate() {
            if row.len() != k + 1 {
                return Err(CoreError::validation(format!(
                    "{}: row {} has {} cells, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    k + 1
                )));
            }
            if row[0] != classes[i] {
                return Err(CoreError::validation(format!(
                    "{}: row {} is labeled {} but column {} is {}",
                    path.display(),
                    i + 1,
                    row[0],
                    i,
                    classes[i]
                )));
            }
            for j in 0..k {
                w[(i, j)] = row[j + 1].parse::<f64>().map_err(|e| {
                    CoreError::validation(format!(
                        "{}: cell ({i},{j}) = {:?}: {e}",
                        path.display(),
                        row[j + 1]
                    ))
                })?;
            }
        }
        let matrix = Self {
            w,
            classes,
            normal: normal.to_string(),
        };
        matrix.validate()?;
        Ok(matrix)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
        let mut header = vec![String::new()];
        header.extend(self.classes.iter().cloned());
        writer
            .write_record(&header)
            .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
        for (i, class) in self.classes.iter().enumerate() {
            let mut row = vec![class.clone()];
            row.extend((0..self.classes.len()).map(|j| format!("{}", self.w[(i, j)])));
            writer
                .write_record(&row)
                .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
        }
        writer
            .flush()
            .map_err(|e| CoreError::io(path.to_path_buf(), e))?;
        Ok(())
    }
}

// -------------------------------------------------------------- binarization

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Elementwise `probs >= threshold` as a 0/1 matrix. The rule is `>=`, so a
/// probability exactly at the threshold activates the class.
pub fn binarize(probs: &Array2<f64>, threshold: f64) -> Result<Array2<f64>> {
    if !(threshold.is_finite() && threshold > 0.0 && threshold < 1.0) {
        return Err(CoreError::validation(format!(
            "threshold must lie strictly inside (0, 1), got {threshold}"
        )));
    }
    Ok(probs.mapv(|p| (p >= threshold) as usize as f64))
}

// -------------------------------------------------------------------- scoring

fn active_set(row: ndarray::ArrayView1<'_, f64>, what: &str, rec: usize) -> Result<Vec<usize>> {
    let mut set = Vec::new();
    for (k, &v) in row.iter().enumerate() {
        if v == 1.0 {
            set.push(k);
        } else if v != 0.0 {
            return Err(CoreError::validation(format!(
                "{what} row {rec} has non-binary entry {v} at class {k}"
            )));
        }
    }
    Ok(set)
}

/// Accumulate the weighted-confusion matrix: per recording, every
/// (truth, prediction) pair gains `1/n` where `n` is the size of the union
/// of the two sets. Empty sets stand in for `{normal}`.
fn accumulate(truth_sets: &[Vec<usize>], pred_sets: &[Vec<usize>], k: usize, normal: usize) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((k, k));
    let normal_set = vec![normal];
    for (truths, preds) in truth_sets.iter().zip(pred_sets.iter()) {
        let truths = if truths.is_empty() { &normal_set } else { truths };
        let preds = if preds.is_empty() { &normal_set } else { preds };
        let mut union = truths.clone();
        for p in preds {
            if !union.contains(p) {
                union.push(*p);
            }
        }
        let share = 1.0 / union.len() as f64;
        for &g in truths {
            for &p in preds {
                a[(g, p)] += share;
            }
        }
    }
    a
}

fn weighted_sum(a: &Array2<f64>, w: &Array2<f64>) -> f64 {
    a.iter().zip(w.iter()).map(|(x, y)| x * y).sum()
}

/// Weighted multi-label accuracy normalized between the always-normal
/// classifier (0) and the perfect classifier (1). Inputs are 0/1 multi-hot
/// matrices whose columns follow the weight matrix's class order. Scores
/// below 0 are possible (worse than always-normal) and are not clamped.
pub fn cinc_score(preds: &Array2<f64>, truths: &Array2<f64>, w: &WeightMatrix) -> Result<f64> {
    w.validate()?;
    let k = w.classes.len();
    if preds.shape() != truths.shape() {
        return Err(CoreError::validation(format!(
            "prediction shape {:?} does not match truth shape {:?}",
            preds.shape(),
            truths.shape()
        )));
    }
    if preds.ncols() != k {
        return Err(CoreError::validation(format!(
            "{} prediction columns for {k} weight-matrix classes",
            preds.ncols()
        )));
    }
    let normal = w.normal_index();
    let mut truth_sets = Vec::with_capacity(truths.nrows());
    let mut pred_sets = Vec::with_capacity(preds.nrows());
    for rec in 0..truths.nrows() {
        truth_sets.push(active_set(truths.row(rec), "truth", rec)?);
        pred_sets.push(active_set(preds.row(rec), "prediction", rec)?);
    }
    let normal_sets: Vec<Vec<usize>> = vec![vec![normal]; truth_sets.len()];

    let s_observed = weighted_sum(&accumulate(&truth_sets, &pred_sets, k, normal), &w.w);
    let s_inactive = weighted_sum(&accumulate(&truth_sets, &normal_sets, k, normal), &w.w);
    let s_perfect = weighted_sum(&accumulate(&truth_sets, &truth_sets, k, normal), &w.w);
    if s_perfect == s_inactive {
        return Ok(0.0);
    }
    Ok((s_observed - s_inactive) / (s_perfect - s_inactive))
}

// ---------------------------------------------------------------- aggregation

/// Per-experiment score summary across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub experiment: String,
    pub leadset: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (n−1 denominator; a single score has
/// deviation 0 by convention).
pub fn aggregate_report(scores: &[f64], experiment: &str, leadset: &str) -> Result<ScoreReport> {
    if scores.is_empty() {
        return Err(CoreError::validation("at least one score is required".to_string()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = if scores.len() == 1 {
        0.0
    } else {
        (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(ScoreReport {
        experiment: experiment.to_string(),
        leadset: leadset.to_string(),
        scores: scores.to_vec(),
        mean,
        std,
    })
}

/// Long-form CSV: one row per (experiment, leadset, seed index).
pub fn write_scores_csv(path: &Path, reports: &[ScoreReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
    writer
        .write_record(["experiment", "leadset", "seed", "score"])
        .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
    for report in reports {
        for (seed, score) in report.scores.iter().enumerate() {
            writer
                .write_record([
                    report.experiment.as_str(),
                    report.leadset.as_str(),
                    &seed.to_string(),
                    &format!("{score:.6}"),
                ])
                .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
        }
    }
    writer.flush().map_err(|e| CoreError::io(path.to_path_buf(), e))?;
    Ok(())
}

/// Summary CSV: one row per (experiment, leadset) with mean and deviation.
pub fn write_summary_csv(path: &Path, reports: &[ScoreReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
    writer
        .write_record(["experiment", "leadset", "mean", "std"])
        .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
    for report in reports {
        writer
            .write_record([
                report.experiment.as_str(),
                report.leadset.as_str(),
                &format!("{:.6}", report.mean),
                &format!("{:.6}", report.std),
            ])
            .map_err(|e| CoreError::validation(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| CoreError::io(path.to_path_buf(), e))?;
    Ok(())
}
