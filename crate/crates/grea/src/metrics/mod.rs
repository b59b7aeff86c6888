//! Evaluation metrics: R² and RMSE for regression, ROC-AUC for binary
//! classification, and precision/recall of recovered rationale nodes
//! against planted ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric inputs must have equal nonzero lengths, got {lhs} and {rhs}")]
    Length { lhs: usize, rhs: usize },
    #[error("r2 is undefined for constant targets")]
    ConstantTargets,
    #[error("roc_auc needs both classes present, got only label {0}")]
    SingleClass(f64),
    #[error("labels must be 0 or 1, got {0}")]
    BadLabel(f64),
    #[error("metric inputs must be finite")]
    NonFinite,
    #[error("rationale truth must be nonempty")]
    EmptyTruth,
    #[error("rationale truth index {idx} out of range for {n} nodes")]
    TruthRange { idx: usize, n: usize },
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(MetricError::Length { lhs: a.len(), rhs: b.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Coefficient of determination, 1 − SS_res/SS_tot. Undefined (error) when
/// the targets are constant.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ConstantTargets);
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    let mse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    Ok(mse.sqrt())
}

/// Area under the ROC curve as the Mann–Whitney rank statistic:
/// P(score⁺ > score⁻) + ½·P(tie) over all positive/negative pairs,
/// computed with average ranks so ties get half credit.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(scores, labels)?;
    for &y in labels {
        if y != 0.0 && y != 1.0 {
            return Err(MetricError::BadLabel(y));
        }
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass(if n_pos == 0 { 0.0 } else { 1.0 }));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // average rank (1-based) within each tie group, summed over positives
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// How the predicted rationale node set is formed from the mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RationaleMode {
    /// Nodes with mask strictly above the threshold.
    Threshold(f64),
    /// The k = |truth| highest-mask nodes; ties broken by node index.
    TopK,
}

/// Precision and recall of the predicted rationale node set against the
/// planted truth. An empty prediction (possible in threshold mode) scores
/// (0, 0).
pub fn rationale_score(
    mask: &[f64],
    truth: &[usize],
    mode: RationaleMode,
) -> Result<(f64, f64)> {
    if truth.is_empty() {
        return Err(MetricError::EmptyTruth);
    }
    if mask.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n = mask.len();
    for &idx in truth {
        if idx >= n {
            return Err(MetricError::TruthRange { idx, n });
        }
    }

    let selected: Vec<usize> = match mode {
        RationaleMode::Threshold(t) => (0..n).filter(|&v| mask[v] > t).collect(),
        RationaleMode::TopK => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                mask[b].partial_cmp(&mask[a]).unwrap().then(a.cmp(&b))
            });
            order.truncate(truth.len().min(n));
            order
        }
    };
    if selected.is_empty() {
        return Ok((0.0, 0.0));
    }
    let hits = selected.iter().filter(|v| truth.contains(v)).count() as f64;
    Ok((hits / selected.len() as f64, hits / truth.len() as f64))
}

/// Flat record of one evaluation, suitable for JSON output. Task metrics
/// are filled according to the task; rationale scores only when ground
/// truth exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale_recall: Option<f64>,
    /// Mean over graphs of the fraction of nodes with mask above 0.5.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale_size_frac: Option<f64>,
    pub n_examples: usize,
}
