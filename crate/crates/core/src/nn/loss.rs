use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default weight of the hard pseudo-label term inside SHOT-IM.
pub const DEFAULT_SHOT_PL_WEIGHT: f64 = 0.3;

/// Training objective. `PseudoLabel` and `ShotIm` are the unsupervised test-time losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    CrossEntropy,
    /// Cross-entropy against the model's own argmax prediction.
    PseudoLabel,
    /// Mean prediction entropy, minus entropy of the mean prediction, plus
    /// `shot_pl_weight` times the pseudo-label cross-entropy.
    ShotIm {
        #[serde(default = "default_pl_weight")]
        shot_pl_weight: f64,
    },
}

fn default_pl_weight() -> f64 {
    DEFAULT_SHOT_PL_WEIGHT
}

impl LossKind {
    pub fn shot() -> Self {
        LossKind::ShotIm {
            shot_pl_weight: DEFAULT_SHOT_PL_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::ShotIm { shot_pl_weight } = *self {
            if !shot_pl_weight.is_finite() || shot_pl_weight < 0.0 {
                return Err(Error::config("shot_pl_weight must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn is_supervised(&self) -> bool {
        matches!(self, LossKind::CrossEntropy)
    }
}

/// Row-wise log-softmax of a `rows x k` logit matrix.
pub(crate) fn log_softmax(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|z| z - lse));
    }
    out
}

/// Index of the largest entry; the lowest index wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss value and its gradient with respect to the logits.
pub(crate) fn loss_and_logit_grad(
    kind: LossKind,
    logits: &[f64],
    k: usize,
    labels: Option<&[usize]>,
) -> Result<(f64, Vec<f64>)> {
    let rows = logits.len() / k;
    let logp = log_softmax(logits, k);
    let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    let inv_b = 1.0 / rows as f64;

    match kind {
        LossKind::CrossEntropy => {
            let labels = labels.ok_or_else(|| Error::precondition("cross-entropy needs labels"))?;
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::precondition(format!("label {bad} out of range for {k} classes")));
            }
            Ok(hard_label_ce(&logp, &probs, k, labels, inv_b, 1.0))
        }
        LossKind::PseudoLabel => {
            reject_labels(labels)?;
            let pseudo = pseudo_labels(&logp, k);
            Ok(hard_label_ce(&logp, &probs, k, &pseudo, inv_b, 1.0))
        }
        LossKind::ShotIm { shot_pl_weight } => {
            reject_labels(labels)?;
            let mut grad = vec![0.0; logits.len()];
            let mut loss = 0.0;

            // mean per-sample entropy
            for i in 0..rows {
                let p = &probs[i * k..(i + 1) * k];
                let lp = &logp[i * k..(i + 1) * k];
                let h = -p.iter().zip(lp).map(|(p, l)| p * l).sum::<f64>();
                loss += h * inv_b;
                for c in 0..k {
                    grad[i * k + c] -= inv_b * p[c] * (lp[c] + h);
                }
            }

            // minus entropy of the mean prediction
            let mut mean = vec![0.0; k];
            for row in probs.chunks_exact(k) {
                for (m, p) in mean.iter_mut().zip(row) {
                    *m += p * inv_b;
                }
            }
            let log_mean: Vec<f64> = mean.iter().map(|&m| if m > 0.0 { m.ln() } else { 0.0 }).collect();
            let mean_entropy = -mean.iter().zip(&log_mean).map(|(m, l)| m * l).sum::<f64>();
            loss -= mean_entropy;
            for i in 0..rows {
                let p = &probs[i * k..(i + 1) * k];
                let cross: f64 = p.iter().zip(&log_mean).map(|(p, l)| p * l).sum();
                for c in 0..k {
                    grad[i * k + c] += inv_b * p[c] * (log_mean[c] - cross);
                }
            }

            if shot_pl_weight > 0.0 {
                let pseudo = pseudo_labels(&logp, k);
                let (pl, pl_grad) = hard_label_ce(&logp, &probs, k, &pseudo, inv_b, shot_pl_weight);
                loss += pl;
                for (g, d) in grad.iter_mut().zip(pl_grad) {
                    *g += d;
                }
            }
            Ok((loss, grad))
        }
    }
}

fn reject_labels(labels: Option<&[usize]>) -> Result<()> {
    if labels.is_some() {
        return Err(Error::precondition("unsupervised losses take label-free batches"));
    }
    Ok(())
}

fn pseudo_labels(logp: &[f64], k: usize) -> Vec<usize> {
    logp.chunks_exact(k).map(argmax).collect()
}

fn hard_label_ce(logp: &[f64], probs: &[f64], k: usize, targets: &[usize], inv_b: f64, weight: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (i, &y) in targets.iter().enumerate() {
        loss -= weight * inv_b * logp[i * k + y];
        for c in 0..k {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad.push(weight * inv_b * (probs[i * k + c] - onehot));
        }
    }
    (loss, grad)
}
