//! Evaluation metrics for predicted class probabilities and recovered
//! annotator confusion matrices.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::crowd::LabelPosterior;
use crate::error::{Result, SvgpcrError};

/// A global score plus one score per true class (`None` for classes absent
/// from the truth).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub global: f64,
    pub per_class: Vec<Option<f64>>,
}

fn check(probs: &DMatrix<f64>, truth: &[usize]) -> Result<()> {
    if probs.nrows() != truth.len() {
        return Err(SvgpcrError::Shape(format!(
            "{} prediction rows but {} true labels",
            probs.nrows(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(SvgpcrError::EmptyDataset("no instances to evaluate".into()));
    }
    if let Some(&l) = truth.iter().find(|&&l| l >= probs.ncols()) {
        return Err(SvgpcrError::Data(format!(
            "true label {l} out of range for {} predicted classes",
            probs.ncols()
        )));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn per_instance(probs: &DMatrix<f64>, truth: &[usize], score: impl Fn(usize) -> f64) -> ClassScores {
    let k = probs.ncols();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut total = 0.0;
    for (n, &t) in truth.iter().enumerate() {
        let s = score(n);
        total += s;
        sums[t] += s;
        counts[t] += 1;
    }
    ClassScores {
        global: total / truth.len() as f64,
        per_class: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
    }
}

pub fn accuracy(probs: &DMatrix<f64>, truth: &[usize]) -> Result<ClassScores> {
    check(probs, truth)?;
    Ok(per_instance(probs, truth, |n| {
        (argmax(probs.row(n).iter().copied()) == truth[n]) as u8 as f64
    }))
}

/// Mean probability assigned to the true class.
pub fn mean_likelihood(probs: &DMatrix<f64>, truth: &[usize]) -> Result<ClassScores> {
    check(probs, truth)?;
    Ok(per_instance(probs, truth, |n| probs[(n, truth[n])]))
}

/// Mean log probability of the true class (probabilities floored at 1e-300).
pub fn mean_log_likelihood(probs: &DMatrix<f64>, truth: &[usize]) -> Result<f64> {
    check(probs, truth)?;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(n, &t)| probs[(n, t)].max(1e-300).ln())
        .sum::<f64>()
        / truth.len() as f64)
}

/// Mann–Whitney AUC for binary `truth` (1 = positive), with ties counted as
/// half.
pub fn auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(SvgpcrError::Shape(format!("{} scores but {} labels", scores.len(), truth.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(SvgpcrError::InvalidInput("NaN score".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SvgpcrError::UndefinedMetric("AUC needs both positive and negative instances".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&o| truth[o]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryError {
    pub max_abs: f64,
    pub mean_abs: f64,
}

/// Entrywise `|estimate − truth|` per annotator.
pub fn confusion_recovery_error(estimated: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<Vec<RecoveryError>> {
    if estimated.len() != truth.len() {
        return Err(SvgpcrError::Shape(format!(
            "{} estimated matrices but {} true ones",
            estimated.len(),
            truth.len()
        )));
    }
    estimated
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(a, (e, t))| {
            if e.shape() != t.shape() {
                return Err(SvgpcrError::Shape(format!(
                    "annotator {a}: estimate is {:?}, truth is {:?}",
                    e.shape(),
                    t.shape()
                )));
            }
            let diff = e - t;
            Ok(RecoveryError {
                max_abs: diff.amax(),
                mean_abs: diff.abs().mean(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconstruction {
    pub accuracy: ClassScores,
    pub likelihood: ClassScores,
}

/// Scores the responsibilities as if they were predictions of the true labels.
pub fn label_reconstruction(q: &LabelPosterior, truth: &[usize]) -> Result<Reconstruction> {
    Ok(Reconstruction {
        accuracy: accuracy(q.matrix(), truth)?,
        likelihood: mean_likelihood(q.matrix(), truth)?,
    })
}
