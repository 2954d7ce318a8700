//! The online test-time loop shared by GALA and the baseline selectors.

use serde::{Deserialize, Serialize};

use crate::gala::SelectionDecision;
use crate::nn::{Batch, ModelParameters, Network};
use crate::{Error, Result};

/// Everything one adaptation step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub decision: SelectionDecision,
    pub warmup_scale: f64,
    pub reset: bool,
    /// Unsupervised loss at the pre-update parameters.
    pub loss: f64,
    /// Argmax predictions of the post-update model.
    pub predictions: Vec<usize>,
}

/// A test-time adaptation strategy. Implementations see label-free batches only.
pub trait Adapter {
    fn step(&mut self, net: &Network, params: &mut ModelParameters, batch: &Batch) -> Result<StepOutcome>;

    fn group_names(&self) -> Vec<String>;
}

/// One row of a decision trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: u64,
    pub correct: usize,
    pub total: usize,
    pub loss: f64,
    pub first_of_window: bool,
    pub skipped: bool,
    pub warmup_scale: f64,
    pub reset: bool,
    pub cosines: Vec<Option<f64>>,
    pub mask: Vec<bool>,
}

/// Adapts `params` in place over `batches`, scoring each post-update prediction
/// against the batch labels. Labels are stripped before the adapter sees a batch.
pub fn run_stream<A: Adapter + ?Sized>(
    adapter: &mut A,
    net: &Network,
    params: &mut ModelParameters,
    batches: &[Batch],
) -> Result<Vec<StepRecord>> {
    let mut records = Vec::with_capacity(batches.len());
    for (i, batch) in batches.iter().enumerate() {
        let labels = batch
            .labels()
            .ok_or_else(|| Error::precondition("stream batches carry labels for scoring"))?;
        let out = adapter.step(net, params, &batch.without_labels())?;
        let correct = out.predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        records.push(StepRecord {
            step: i as u64 + 1,
            correct,
            total: batch.len(),
            loss: out.loss,
            first_of_window: out.decision.first_of_window,
            skipped: out.decision.skipped,
            warmup_scale: out.warmup_scale,
            reset: out.reset,
            cosines: out.decision.cosines,
            mask: out.decision.mask,
        });
    }
    Ok(records)
}
