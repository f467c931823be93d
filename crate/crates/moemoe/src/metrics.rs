//! Exact-match accuracy and precision-thresholded recall.
//!
//! The recall metric sweeps candidate confidence thresholds over the
//! observed confidence values (the recall-versus-threshold curve is
//! piecewise constant with breakpoints only there) and reports the best
//! recall whose precision clears the floor.

use serde::Serialize;

use crate::data::{SourceLabel, EOS_ID, PAD_ID};
use crate::tensor::TensorError;

/// One scored prediction against its gold answer.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionRecord {
    pub predicted: Vec<usize>,
    pub confidence: f64,
    pub gold: Vec<usize>,
    pub attribute_id: usize,
    pub source_label: SourceLabel,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        strip(&self.predicted) == strip(&self.gold)
    }
}

fn strip(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != PAD_ID && t != EOS_ID)
        .collect()
}

/// Fraction of exact token-sequence matches after pad/end stripping.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64, TensorError> {
    if records.is_empty() {
        return Err(TensorError::EmptyInput("accuracy"));
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Best recall over confidence thresholds with precision at least `p_min`,
/// plus the achieving threshold. Ties over thresholds resolve to the highest
/// one (the smallest answered set). When no threshold qualifies the recall
/// is zero and the threshold is `+inf`.
pub fn recall_at_precision(
    records: &[PredictionRecord],
    p_min: f64,
) -> Result<(f64, f64), TensorError> {
    if records.is_empty() {
        return Err(TensorError::EmptyInput("recall_at_precision"));
    }
    let total = records.len() as f64;
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut best: Option<(f64, f64)> = None;
    for &tau in &thresholds {
        let answered: Vec<&PredictionRecord> =
            records.iter().filter(|r| r.confidence >= tau).collect();
        if answered.is_empty() {
            continue;
        }
        let correct = answered.iter().filter(|r| r.is_correct()).count() as f64;
        let precision = correct / answered.len() as f64;
        let recall = correct / total;
        if precision >= p_min && best.map_or(true, |(r, _)| recall > r) {
            best = Some((recall, tau));
        }
    }
    Ok(best.unwrap_or((0.0, f64::INFINITY)))
}

/// Metrics for one group of records.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub group: String,
    pub n: usize,
    pub accuracy: f64,
    pub recall_at_90: f64,
    pub threshold: f64,
}

/// Per-group report plus the macro average across groups.
#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub rows: Vec<ReportRow>,
    pub macro_accuracy: f64,
    pub macro_recall: f64,
}

fn grouped_report<K, F>(records: &[PredictionRecord], key: F, p_min: f64) -> GroupReport
where
    K: Ord + ToString,
    F: Fn(&PredictionRecord) -> K,
{
    let mut keys: Vec<K> = records.iter().map(&key).collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::with_capacity(keys.len());
    for k in keys {
        let group: Vec<PredictionRecord> = records
            .iter()
            .filter(|r| key(r).to_string() == k.to_string())
            .cloned()
            .collect();
        let acc = accuracy(&group).expect("group is nonempty");
        let (recall, threshold) = recall_at_precision(&group, p_min).expect("group is nonempty");
        rows.push(ReportRow {
            group: k.to_string(),
            n: group.len(),
            accuracy: acc,
            recall_at_90: recall,
            threshold,
        });
    }
    let n = rows.len().max(1) as f64;
    GroupReport {
        macro_accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        macro_recall: rows.iter().map(|r| r.recall_at_90).sum::<f64>() / n,
        rows,
    }
}

/// Group by attribute id, reporting accuracy and recall per attribute.
pub fn per_attribute_report(
    records: &[PredictionRecord],
    p_min: f64,
) -> Result<GroupReport, TensorError> {
    if records.is_empty() {
        return Err(TensorError::EmptyInput("per_attribute_report"));
    }
    Ok(grouped_report(records, |r| r.attribute_id, p_min))
}

/// Group by answer-source label.
pub fn per_source_report(
    records: &[PredictionRecord],
    p_min: f64,
) -> Result<GroupReport, TensorError> {
    if records.is_empty() {
        return Err(TensorError::EmptyInput("per_source_report"));
    }
    Ok(grouped_report(records, |r| r.source_label.to_string(), p_min))
}

impl GroupReport {
    /// Aligned text table.
    pub fn to_table(&self, group_header: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>6} {:>10} {:>12} {:>11}\n",
            group_header, "n", "accuracy", "recall@90", "threshold"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>6} {:>10.4} {:>12.4} {:>11}\n",
                r.group,
                r.n,
                r.accuracy,
                r.recall_at_90,
                if r.threshold.is_finite() {
                    format!("{:.4}", r.threshold)
                } else {
                    "none".to_string()
                }
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>6} {:>10.4} {:>12.4} {:>11}\n",
            "macro-avg", "-", self.macro_accuracy, self.macro_recall, "-"
        ));
        out
    }

    /// CSV with the same columns.
    pub fn to_csv(&self, group_header: &str) -> String {
        let mut out = format!("{group_header},n,accuracy,recall_at_90,threshold\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.group, r.n, r.accuracy, r.recall_at_90, r.threshold
            ));
        }
        out
    }
}
