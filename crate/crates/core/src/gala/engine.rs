use serde::{Deserialize, Serialize};

use super::criterion::cosine_alignment;
use super::{GalaConfig, Granularity, ParameterGrouping, WarmupMode};
use crate::adapt::{Adapter, StepOutcome};
use crate::nn::{loss_and_gradients, predict, Batch, LossKind, ModelParameters, Network, OptimizerConfig};
use crate::{Error, Result};

/// Per-group pre-mask update `-lr * grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateProposal(pub Vec<Vec<f64>>);

impl UpdateProposal {
    pub fn from_gradients(grads: &[Vec<f64>], lr: f64, grouping: &ParameterGrouping) -> Result<Self> {
        let mut grouped = grouping.gather(grads)?;
        for g in &mut grouped {
            for v in g.iter_mut() {
                *v *= -lr;
            }
        }
        Ok(Self(grouped))
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.0
    }
}

/// Anchor parameters and window bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorState {
    pub anchor: Vec<Vec<f64>>,
    pub last_reset_step: u64,
    /// Number of completed steps.
    pub step: u64,
}

impl AnchorState {
    pub fn new(live: Vec<Vec<f64>>) -> Self {
        Self {
            anchor: live,
            last_reset_step: 0,
            step: 0,
        }
    }

    /// Whether the next step is the first of a window.
    pub fn at_window_start(&self) -> bool {
        self.step == self.last_reset_step
    }

    /// 1-based position of the next step inside its window.
    pub fn next_position(&self) -> u64 {
        self.step + 1 - self.last_reset_step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    /// `None` where the cosine is undefined.
    pub cosines: Vec<Option<f64>>,
    pub mask: Vec<bool>,
    /// No group was updated.
    pub skipped: bool,
    pub first_of_window: bool,
}

impl SelectionDecision {
    pub fn selected_groups(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(g, _)| g)
            .collect()
    }

    /// A decision with an explicit mask and no cosine information.
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let skipped = !mask.iter().any(|&m| m);
        Self {
            cosines: vec![None; mask.len()],
            mask,
            skipped,
            first_of_window: false,
        }
    }
}

fn check_shapes(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::shape(format!("{what} shapes differ")));
    }
    Ok(())
}

/// Scores each group and builds the update mask.
///
/// The first step of a window updates every group. Otherwise single-layer and block
/// granularity pick the highest cosine above the threshold (lowest index on ties) and
/// multi-layer takes every group above it. Undefined cosines never pass.
pub fn decide(
    proposal: &UpdateProposal,
    live: &[Vec<f64>],
    anchor: &AnchorState,
    cfg: &GalaConfig,
) -> Result<SelectionDecision> {
    check_shapes(&proposal.0, live, "proposal/live")?;
    check_shapes(live, &anchor.anchor, "live/anchor")?;

    let mut td = Vec::new();
    let cosines: Vec<Option<f64>> = proposal
        .0
        .iter()
        .zip(live.iter().zip(&anchor.anchor))
        .map(|(u, (l, a))| {
            td.clear();
            td.extend(l.iter().zip(a).map(|(x, y)| x - y));
            cosine_alignment(u, &td, cfg.epsilon)
        })
        .collect();

    let first_of_window = anchor.at_window_start();
    let passes = |c: &Option<f64>| matches!(c, Some(v) if *v > cfg.threshold);
    let mask: Vec<bool> = if first_of_window {
        vec![true; cosines.len()]
    } else {
        match cfg.granularity {
            Granularity::MultiLayer => cosines.iter().map(passes).collect(),
            Granularity::SingleLayer | Granularity::Block => {
                let mut best: Option<(usize, f64)> = None;
                for (g, c) in cosines.iter().enumerate() {
                    if let Some(v) = c {
                        if passes(c) && best.is_none_or(|(_, b)| *v > b) {
                            best = Some((g, *v));
                        }
                    }
                }
                let mut mask = vec![false; cosines.len()];
                if let Some((g, _)) = best {
                    mask[g] = true;
                }
                mask
            }
        }
    };
    let skipped = !mask.iter().any(|&m| m);
    Ok(SelectionDecision {
        cosines,
        mask,
        skipped,
        first_of_window,
    })
}

/// Scale for the update at 1-based `position` in its window.
pub fn warmup_scale(cfg: &GalaConfig, position: u64) -> f64 {
    match cfg.warmup_mode {
        WarmupMode::LinearRamp if cfg.warmup_len > 0 && position <= cfg.warmup_len => {
            position as f64 / cfg.warmup_len as f64
        }
        _ => 1.0,
    }
}

/// `live[g] += scale * u[g]` on masked groups.
pub fn apply_masked_update(
    live: &mut [Vec<f64>],
    proposal: &UpdateProposal,
    decision: &SelectionDecision,
    scale: f64,
) -> Result<()> {
    check_shapes(live, &proposal.0, "live/proposal")?;
    if decision.mask.len() != live.len() {
        return Err(Error::shape("mask length differs from group count"));
    }
    for ((theta, u), &m) in live.iter_mut().zip(&proposal.0).zip(&decision.mask) {
        if !m {
            continue;
        }
        if scale == 1.0 {
            theta.iter_mut().zip(u).for_each(|(t, d)| *t += d);
        } else {
            theta.iter_mut().zip(u).for_each(|(t, d)| *t += scale * d);
        }
    }
    Ok(())
}

/// Refreshes the anchor when the completed step count is a multiple of the window.
/// Returns whether a reset happened.
pub fn maybe_reset(anchor: &mut AnchorState, live: &[Vec<f64>], cfg: &GalaConfig) -> bool {
    match cfg.window.steps() {
        Some(s) if anchor.step > 0 && anchor.step.is_multiple_of(s) => {
            anchor.anchor = live.to_vec();
            anchor.last_reset_step = anchor.step;
            true
        }
        _ => false,
    }
}

/// The GALA adapter: owns the anchor state for one adaptation run.
#[derive(Debug, Clone)]
pub struct Gala {
    cfg: GalaConfig,
    loss: LossKind,
    opt: OptimizerConfig,
    grouping: ParameterGrouping,
    anchor: AnchorState,
}

impl Gala {
    pub fn new(
        net: &Network,
        params: &ModelParameters,
        cfg: GalaConfig,
        loss: LossKind,
        opt: OptimizerConfig,
    ) -> Result<Self> {
        let grouping = ParameterGrouping::for_granularity(net, cfg.granularity, cfg.blocks)?;
        Self::with_grouping(params, cfg, loss, opt, grouping)
    }

    pub fn with_grouping(
        params: &ModelParameters,
        cfg: GalaConfig,
        loss: LossKind,
        opt: OptimizerConfig,
        grouping: ParameterGrouping,
    ) -> Result<Self> {
        cfg.validate()?;
        opt.validate()?;
        loss.validate()?;
        if loss.is_supervised() {
            return Err(Error::config("test-time adaptation needs an unsupervised loss"));
        }
        let anchor = AnchorState::new(grouping.gather(&params.layers)?);
        Ok(Self {
            cfg,
            loss,
            opt,
            grouping,
            anchor,
        })
    }

    pub fn anchor(&self) -> &AnchorState {
        &self.anchor
    }

    pub fn grouping(&self) -> &ParameterGrouping {
        &self.grouping
    }

    pub fn config(&self) -> &GalaConfig {
        &self.cfg
    }
}

impl Adapter for Gala {
    fn step(&mut self, net: &Network, params: &mut ModelParameters, batch: &Batch) -> Result<StepOutcome> {
        let (loss, grads) = loss_and_gradients(net, params, batch, self.loss)?;
        let proposal = UpdateProposal::from_gradients(&grads, self.opt.learning_rate, &self.grouping)?;
        let mut live = self.grouping.gather(&params.layers)?;
        let decision = decide(&proposal, &live, &self.anchor, &self.cfg)?;
        let scale = warmup_scale(&self.cfg, self.anchor.next_position());
        if !decision.skipped {
            apply_masked_update(&mut live, &proposal, &decision, scale)?;
            self.grouping.scatter(&live, &mut params.layers)?;
        }
        self.anchor.step += 1;
        let reset = maybe_reset(&mut self.anchor, &live, &self.cfg);
        let predictions = predict(net, params, batch)?;
        Ok(StepOutcome {
            decision,
            warmup_scale: scale,
            reset,
            loss,
            predictions,
        })
    }

    fn group_names(&self) -> Vec<String> {
        self.grouping.names()
    }
}
