//! Comparison selectors sharing the GALA step shape.
//!
//! AutoRGN here is a reconstruction of the relative-gradient-norm heuristic from
//! surgical fine-tuning: each group's step is scaled by its max-normalized moving
//! average of `|grad_g| / |theta_g|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{run_stream, Adapter, StepOutcome};
use crate::gala::{apply_masked_update, ParameterGrouping, SelectionDecision, UpdateProposal};
use crate::nn::{loss_and_gradients, predict, Batch, LossKind, ModelParameters, Network, OptimizerConfig};
use crate::{Error, Result};

pub const RGN_DECAY: f64 = 0.9;
const RGN_EPS: f64 = 1e-12;

/// Selector as named in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectorKind {
    Erm,
    AllLayers,
    RandomBlock {
        rng_seed: u64,
    },
    /// Always adapt the group that scored best in an oracle sweep.
    OracleBest,
    /// Always adapt the group that scored worst in an oracle sweep.
    OracleWorst,
    AutoRgn,
}

impl SelectorKind {
    pub fn needs_oracle(&self) -> bool {
        matches!(self, SelectorKind::OracleBest | SelectorKind::OracleWorst)
    }

    /// Concrete per-step rule; oracle variants need the sweep result.
    pub fn resolve(&self, oracle: Option<&OracleResult>) -> Result<Selector> {
        Ok(match *self {
            SelectorKind::Erm => Selector::Erm,
            SelectorKind::AllLayers => Selector::AllLayers,
            SelectorKind::RandomBlock { rng_seed } => Selector::RandomBlock { rng_seed },
            SelectorKind::AutoRgn => Selector::AutoRgn,
            SelectorKind::OracleBest | SelectorKind::OracleWorst => {
                let oracle = oracle.ok_or_else(|| {
                    Error::precondition("oracle selectors need an oracle sweep over a labeled stream")
                })?;
                Selector::FixedGroup(if *self == SelectorKind::OracleBest {
                    oracle.best
                } else {
                    oracle.worst
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    Erm,
    AllLayers,
    RandomBlock { rng_seed: u64 },
    FixedGroup(usize),
    AutoRgn,
}

/// Baseline adapter: plain SGD on the groups its selector picks.
#[derive(Debug, Clone)]
pub struct Baseline {
    selector: Selector,
    loss: LossKind,
    opt: OptimizerConfig,
    grouping: ParameterGrouping,
    rng: ChaCha8Rng,
    rgn_ema: Option<Vec<f64>>,
}

impl Baseline {
    pub fn new(selector: Selector, grouping: ParameterGrouping, loss: LossKind, opt: OptimizerConfig) -> Result<Self> {
        opt.validate()?;
        loss.validate()?;
        if loss.is_supervised() {
            return Err(Error::config("test-time adaptation needs an unsupervised loss"));
        }
        if let Selector::FixedGroup(g) = selector {
            if g >= grouping.len() {
                return Err(Error::config(format!("group {g} out of range")));
            }
        }
        let seed = match selector {
            Selector::RandomBlock { rng_seed } => rng_seed,
            _ => 0,
        };
        Ok(Self {
            selector,
            loss,
            opt,
            grouping,
            rng: ChaCha8Rng::seed_from_u64(seed),
            rgn_ema: None,
        })
    }

    fn rgn_weights(&mut self, grads: &[Vec<f64>], live: &[Vec<f64>]) -> Vec<f64> {
        let rgn: Vec<f64> = grads
            .iter()
            .zip(live)
            .map(|(g, t)| norm(g) / (norm(t) + RGN_EPS))
            .collect();
        let ema = match self.rgn_ema.take() {
            None => rgn,
            Some(prev) => prev
                .iter()
                .zip(&rgn)
                .map(|(e, r)| RGN_DECAY * e + (1.0 - RGN_DECAY) * r)
                .collect(),
        };
        let max = ema.iter().copied().fold(0.0, f64::max);
        let weights = if max > 0.0 {
            ema.iter().map(|e| e / max).collect()
        } else {
            vec![0.0; ema.len()]
        };
        self.rgn_ema = Some(ema);
        weights
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Adapter for Baseline {
    fn step(&mut self, net: &Network, params: &mut ModelParameters, batch: &Batch) -> Result<StepOutcome> {
        let groups = self.grouping.len();
        let (loss, grads) = loss_and_gradients(net, params, batch, self.loss)?;
        let mask: Vec<bool> = match self.selector {
            Selector::Erm => vec![false; groups],
            Selector::AllLayers | Selector::AutoRgn => vec![true; groups],
            Selector::RandomBlock { .. } => {
                let pick = self.rng.random_range(0..groups);
                (0..groups).map(|g| g == pick).collect()
            }
            Selector::FixedGroup(pick) => (0..groups).map(|g| g == pick).collect(),
        };
        let mut decision = SelectionDecision::from_mask(mask);

        if !decision.skipped {
            let mut proposal = UpdateProposal::from_gradients(&grads, self.opt.learning_rate, &self.grouping)?;
            let mut live = self.grouping.gather(&params.layers)?;
            if self.selector == Selector::AutoRgn {
                let grouped_grads = self.grouping.gather(&grads)?;
                let weights = self.rgn_weights(&grouped_grads, &live);
                for (u, w) in proposal.0.iter_mut().zip(&weights) {
                    u.iter_mut().for_each(|v| *v *= w);
                }
                for (m, w) in decision.mask.iter_mut().zip(&weights) {
                    *m = *w > 0.0;
                }
                decision.skipped = !decision.mask.iter().any(|&m| m);
            }
            apply_masked_update(&mut live, &proposal, &decision, 1.0)?;
            self.grouping.scatter(&live, &mut params.layers)?;
        }

        let predictions = predict(net, params, batch)?;
        Ok(StepOutcome {
            decision,
            warmup_scale: 1.0,
            reset: false,
            loss,
            predictions,
        })
    }

    fn group_names(&self) -> Vec<String> {
        self.grouping.names()
    }
}

/// Per-group online accuracy from single-group adaptation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Percent online accuracy when only group `g` is ever adapted.
    pub accuracies: Vec<f64>,
    pub best: usize,
    pub worst: usize,
}

/// Runs one adaptation pass per group from the same pretrained parameters, each
/// updating only that group. Labels are used for scoring only.
pub fn oracle_sweep(
    net: &Network,
    pretrained: &ModelParameters,
    stream: &[Batch],
    loss: LossKind,
    opt: OptimizerConfig,
    grouping: &ParameterGrouping,
) -> Result<OracleResult> {
    if grouping.len() < 2 {
        return Err(Error::precondition("an oracle sweep needs at least two groups"));
    }
    if stream.is_empty() {
        return Err(Error::precondition("empty stream"));
    }
    let accuracies = (0..grouping.len())
        .map(|g| {
            let mut params = pretrained.clone();
            let mut adapter = Baseline::new(Selector::FixedGroup(g), grouping.clone(), loss, opt)?;
            let records = run_stream(&mut adapter, net, &mut params, stream)?;
            let correct: usize = records.iter().map(|r| r.correct).sum();
            let total: usize = records.iter().map(|r| r.total).sum();
            Ok(100.0 * correct as f64 / total as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut best = 0;
    let mut worst = 0;
    for (g, &a) in accuracies.iter().enumerate() {
        if a > accuracies[best] {
            best = g;
        }
        if a < accuracies[worst] {
            worst = g;
        }
    }
    Ok(OracleResult {
        accuracies,
        best,
        worst,
    })
}
