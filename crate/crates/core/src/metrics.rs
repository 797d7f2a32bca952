//! Ranking metrics for multi-label scores: macro mAP and macro ROC AUC.
//!
//! Scores and labels are `M x C` row-major slices (M clips, C classes).

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A macro-averaged metric with its per-class values. Classes that cannot
/// be scored (no positives, or for AUC no negatives) are `None` and listed
/// in `skipped`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroMetric {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

fn column(data: &[f64], rows: usize, cols: usize, c: usize) -> Vec<f64> {
    (0..rows).map(|i| data[i * cols + c]).collect()
}

fn check_dims(scores: &[f64], labels: &[f64], classes: usize) -> Result<usize> {
    if classes == 0 || scores.len() != labels.len() || scores.len() % classes != 0 {
        return Err(Error::shape("metric", &[scores.len()], &[labels.len(), classes]));
    }
    Ok(scores.len() / classes)
}

/// Average precision of one ranking: the mean over positives of the
/// precision at each positive's rank. Ties keep ascending index order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps index order within ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Mann-Whitney AUC with tied scores counted as one half.
pub fn binary_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over runs of equal scores
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_run = order[start..end].iter().filter(|&&i| labels[i] > 0.5).count();
        rank_sum_pos += avg_rank * pos_in_run as f64;
        start = end;
    }
    let (p, q) = (pos as f64, neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

fn macro_average(
    name: &'static str,
    scores: &[f64],
    labels: &[f64],
    classes: usize,
    per_class_fn: impl Fn(&[f64], &[f64]) -> Option<f64>,
) -> Result<MacroMetric> {
    let rows = check_dims(scores, labels, classes)?;
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            per_class_fn(
                &column(scores, rows, classes, c),
                &column(labels, rows, classes, c),
            )
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::NoScorableClasses(name));
    }
    let skipped = per_class
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(c, _)| c)
        .collect();
    Ok(MacroMetric {
        value: scored.iter().sum::<f64>() / scored.len() as f64,
        per_class,
        skipped,
    })
}

pub fn mean_average_precision(scores: &[f64], labels: &[f64], classes: usize) -> Result<MacroMetric> {
    macro_average("mAP", scores, labels, classes, average_precision)
}

pub fn auc_roc(scores: &[f64], labels: &[f64], classes: usize) -> Result<MacroMetric> {
    macro_average("AUC", scores, labels, classes, binary_auc)
}

/// Result of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: MacroMetric,
    pub auc: MacroMetric,
    pub clips: usize,
}

impl EvalReport {
    pub fn compute(scores: &[f64], labels: &[f64], classes: usize) -> Result<Self> {
        Ok(EvalReport {
            map: mean_average_precision(scores, labels, classes)?,
            auc: auc_roc(scores, labels, classes)?,
            clips: check_dims(scores, labels, classes)?,
        })
    }

    /// Human-readable lines.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "clips {}\nmAP {:.6}\nAUC {:.6}\n",
            self.clips, self.map.value, self.auc.value
        );
        for (c, (ap, auc)) in self.map.per_class.iter().zip(&self.auc.per_class).enumerate() {
            let fmt = |v: &Option<f64>| v.map_or("skipped".to_string(), |x| format!("{x:.6}"));
            let _ = writeln!(out, "class {c} AP {} AUC {}", fmt(ap), fmt(auc));
        }
        out
    }

    /// Machine-readable summary, one `key=value` per line:
    /// `clips`, `map`, `auc`, `classes_scored_map`, `classes_scored_auc`,
    /// `ap.<class>` and `auc.<class>` (`nan` when skipped).
    pub fn to_summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "clips={}", self.clips);
        let _ = writeln!(out, "map={}", self.map.value);
        let _ = writeln!(out, "auc={}", self.auc.value);
        let scored = |m: &MacroMetric| m.per_class.len() - m.skipped.len();
        let _ = writeln!(out, "classes_scored_map={}", scored(&self.map));
        let _ = writeln!(out, "classes_scored_auc={}", scored(&self.auc));
        for (c, v) in self.map.per_class.iter().enumerate() {
            let _ = writeln!(out, "ap.{c}={}", v.unwrap_or(f64::NAN));
        }
        for (c, v) in self.auc.per_class.iter().enumerate() {
            let _ = writeln!(out, "auc.{c}={}", v.unwrap_or(f64::NAN));
        }
        out
    }
}
