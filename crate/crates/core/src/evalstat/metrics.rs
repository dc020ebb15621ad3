use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::LabeledTarget;
use crate::error::{Error, Result};

/// Mid-ranks (1-based) of `values`, ties sharing the average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::AurocUndefined("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined(format!(
            "needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let ranks = midranks(scores);
    // sum of positive ranks minus its minimum is (concordant + ties/2)
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUROC over `probs[i][k]`. Classes without both
/// positive and negative samples are skipped and reported.
pub fn auroc_ovr(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<(f64, Vec<String>)> {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut warnings = Vec::new();
    for c in 0..k {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match auroc(&scores, &truth) {
            Ok(a) => {
                sum += a;
                used += 1;
            }
            Err(Error::AurocUndefined(_)) => warnings.push(format!("class {c} skipped in macro AUROC")),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::AurocUndefined("no class has both positives and negatives".into()));
    }
    Ok((sum / used as f64, warnings))
}

/// `m[truth][pred]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::Shape(format!("class index outside 0..{k}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Balanced accuracy and precision/recall/F1. Binary tasks (`k = 2`) report
/// the positive class; multiclass tasks report macro averages over classes
/// present in `labels`.
pub fn classification_metrics(predictions: &[usize], labels: &[usize], k: usize) -> Result<ClassificationMetrics> {
    if labels.is_empty() {
        return Err(Error::EmptyScope("no labels".into()));
    }
    let m = confusion_matrix(predictions, labels, k)?;
    let support: Vec<u64> = m.iter().map(|row| row.iter().sum()).collect();
    let predicted: Vec<u64> = (0..k).map(|c| m.iter().map(|row| row[c]).sum()).collect();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut warnings = Vec::new();
    let present: Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
    for c in (0..k).filter(|c| support[*c] == 0) {
        warnings.push(format!("class {c} absent from labels; excluded from averages"));
    }
    let recall_of = |c: usize| ratio(m[c][c], support[c]);
    let precision_of = |c: usize| ratio(m[c][c], predicted[c]);
    let f1_of = |c: usize| {
        let (p, r) = (precision_of(c), recall_of(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    let balanced_accuracy = present.iter().map(|&c| recall_of(c)).sum::<f64>() / present.len() as f64;
    let (precision, recall, f1) = if k == 2 {
        (precision_of(1), recall_of(1), f1_of(1))
    } else {
        let n = present.len() as f64;
        (
            present.iter().map(|&c| precision_of(c)).sum::<f64>() / n,
            present.iter().map(|&c| recall_of(c)).sum::<f64>() / n,
            present.iter().map(|&c| f1_of(c)).sum::<f64>() / n,
        )
    };
    Ok(ClassificationMetrics {
        balanced_accuracy,
        precision,
        recall,
        f1,
        confusion: m,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
}

pub fn regression_metrics(predictions: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyScope("no predictions".into()));
    }
    let n = predictions.len() as f64;
    let (abs, sq) = predictions
        .iter()
        .zip(targets)
        .fold((0.0, 0.0), |(a, s), (p, t)| (a + (p - t).abs(), s + (p - t).powi(2)));
    Ok(RegressionMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

/// One confusion matrix per group; masked labels are skipped and entries
/// without a group land under `other`.
pub fn grouped_confusion(
    predictions: &[usize],
    labels: &[LabeledTarget],
    groups: &[Option<&str>],
    k: usize,
) -> Result<BTreeMap<String, Vec<Vec<u64>>>> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::Shape("predictions, labels and groups differ in length".into()));
    }
    let mut out: BTreeMap<String, Vec<Vec<u64>>> = BTreeMap::new();
    for ((&p, label), group) in predictions.iter().zip(labels).zip(groups) {
        let Some(t) = label.class_index() else { continue };
        if p >= k || t >= k {
            return Err(Error::Shape(format!("class index outside 0..{k}")));
        }
        let key = group.unwrap_or("other").to_string();
        out.entry(key).or_insert_with(|| vec![vec![0; k]; k])[t][p] += 1;
    }
    Ok(out)
}

/// Index of the largest value; the first wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v.partial_cmp(&bv) == Some(Ordering::Greater) {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
