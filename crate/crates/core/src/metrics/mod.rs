//! Evaluation metrics: online accuracy, held-out generalization, forgetting,
//! selection frequency and rank agreement with an oracle.

mod geometry;
mod report;

pub use geometry::{geometry_grid, GeometryGrid};
pub use report::{
    aggregate, read_aggregate_csv, read_trace, write_aggregate_csv, write_trace, AggregateRow, MetricsSummary,
    SUMMARY_FORMAT_VERSION, TRACE_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::adapt::StepRecord;
use crate::nn::{accuracy, Batch, ModelParameters, Network};
use crate::{Error, Result};

/// Trace and outcome of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub group_names: Vec<String>,
    pub final_params: ModelParameters,
    pub fingerprint: String,
    pub seed: u64,
}

/// Percent of stream samples predicted correctly right after their own update.
pub fn tta_accuracy(steps: &[StepRecord]) -> Result<f64> {
    let total: usize = steps.iter().map(|s| s.total).sum();
    if total == 0 {
        return Err(Error::precondition("no samples in run record"));
    }
    let correct: usize = steps.iter().map(|s| s.correct).sum();
    Ok(100.0 * correct as f64 / total as f64)
}

/// Accuracy of the adapted model on the target domain's held-out split.
pub fn generalization(net: &Network, final_params: &ModelParameters, target_holdout: &Batch) -> Result<f64> {
    if target_holdout.is_empty() {
        return Err(Error::precondition("empty target holdout"));
    }
    accuracy(net, final_params, target_holdout)
}

/// Source-holdout accuracy lost by adaptation; negative when adaptation helped.
pub fn forgetting(
    net: &Network,
    pretrained: &ModelParameters,
    final_params: &ModelParameters,
    source_holdout: &Batch,
) -> Result<f64> {
    if source_holdout.is_empty() {
        return Err(Error::precondition("empty source holdout"));
    }
    Ok(accuracy(net, pretrained, source_holdout)? - accuracy(net, final_params, source_holdout)?)
}

/// Fraction of non-first-of-window steps on which each group was updated. Skipped
/// steps count in the denominator.
pub fn selection_frequency(steps: &[StepRecord], groups: usize) -> Vec<f64> {
    let mut counts = vec![0usize; groups];
    let mut n = 0usize;
    for s in steps.iter().filter(|s| !s.first_of_window) {
        n += 1;
        for (c, &m) in counts.iter_mut().zip(&s.mask) {
            if m {
                *c += 1;
            }
        }
    }
    if n == 0 {
        return vec![0.0; groups];
    }
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman_rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Undefined(format!("lengths differ ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Undefined("need at least two observations".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Undefined("NaN in input".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Undefined("constant ranking".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}
