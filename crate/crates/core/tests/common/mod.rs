#![allow(dead_code)]

use gala_core::adapt::Adapter;
use gala_core::experiment::{ExperimentConfig, PretrainSettings, SelectorConfig, StreamConfig};
use gala_core::gala::{
    cosine_alignment, decide, AnchorState, Gala, GalaConfig, Granularity, UpdateProposal, WarmupMode, Window,
};
use gala_core::nn::{
    forward_logits, loss_and_gradients, Activation, Batch, LayerSpec, LossKind, ModelParameters, Network,
    OptimizerConfig,
};
use gala_core::shiftbench::{seeded_rng, Geometry, ShiftKind, ShiftSpec, StreamMode, TaskSpec};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Scenarios

fn mlp(input: usize, hidden: &[usize], k: usize) -> Vec<LayerSpec> {
    Network::mlp(input, hidden, k, Activation::Relu).unwrap().into()
}

fn blobs(num_classes: usize, input_dim: usize, samples_per_domain: usize) -> TaskSpec {
    TaskSpec {
        num_classes,
        input_dim,
        class_geometry: Geometry::GaussianBlobs,
        samples_per_domain,
        seed: 11,
    }
}

fn pretrain() -> PretrainSettings {
    PretrainSettings {
        steps: 600,
        batch_size: 32,
        learning_rate: 0.1,
    }
}

fn config(
    task: TaskSpec,
    model: Vec<LayerSpec>,
    shifts: Vec<ShiftSpec>,
    mode: StreamMode,
    batch_size: usize,
    loss: LossKind,
    lr: f64,
) -> ExperimentConfig {
    ExperimentConfig {
        task,
        stream: StreamConfig {
            shifts,
            mode,
            batch_size,
        },
        model,
        pretrain: pretrain(),
        loss,
        selector: SelectorConfig::Erm,
        optimizer: OptimizerConfig::sgd(lr),
        seeds: (0..10).collect(),
        output_dir: None,
        baseline_blocks: None,
        oracle_rank: false,
        sweep: None,
        geometry: None,
    }
}

/// Five-shift continual stream on which plain pseudo-labeling of every layer collapses.
pub fn collapse_config(batch_size: usize) -> ExperimentConfig {
    config(
        blobs(4, 2, 400),
        mlp(2, &[16; 5], 4),
        vec![
            ShiftSpec::new(ShiftKind::AdditiveNoise, 2),
            ShiftSpec::new(ShiftKind::Translation, 2),
            ShiftSpec::new(ShiftKind::FeatureScale, 2),
            ShiftSpec::rotation(2, 15.0),
            ShiftSpec::new(ShiftKind::AdditiveNoise, 3),
        ],
        StreamMode::Continual,
        batch_size,
        LossKind::PseudoLabel,
        0.2,
    )
}

/// Rotation by +30 degrees followed by its inverse.
pub fn reset_config(window: Window) -> ExperimentConfig {
    let mut cfg = config(
        blobs(4, 2, 400),
        mlp(2, &[16; 4], 4),
        vec![ShiftSpec::rotation(2, 15.0), ShiftSpec::rotation(2, -15.0)],
        StreamMode::Continual,
        16,
        LossKind::PseudoLabel,
        0.1,
    );
    cfg.selector = SelectorConfig::Gala(GalaConfig {
        window,
        ..GalaConfig::default()
    });
    cfg
}

/// Four-group network under a class-conditional shift, with an oracle sweep.
pub fn rank_config() -> ExperimentConfig {
    let shift = ShiftSpec {
        distance_per_level: Some(0.5),
        std_per_level: Some(0.05),
        ..ShiftSpec::label_conditional(5, 0)
    };
    let mut cfg = config(
        blobs(8, 8, 2000),
        mlp(8, &[16; 3], 8),
        vec![shift],
        StreamMode::Single,
        16,
        LossKind::shot(),
        0.1,
    );
    cfg.oracle_rank = true;
    cfg
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---------------------------------------------------------------------------
// Random networks

const ACTIVATIONS: [Activation; 3] = [Activation::Relu, Activation::Tanh, Activation::Identity];

/// Random dense/normalization stack with at most `max_params` parameters.
pub fn random_network(rng: &mut ChaCha8Rng, max_params: usize) -> Network {
    loop {
        let input = rng.random_range(1..=6);
        let k = rng.random_range(2..=5);
        let depth = rng.random_range(0..=3);
        let mut layers = Vec::new();
        let mut d = input;
        for _ in 0..depth {
            let w = rng.random_range(1..=24);
            let act = ACTIVATIONS[rng.random_range(0..3)];
            if rng.random_bool(0.3) {
                layers.push(LayerSpec::dense(d, w, Activation::Identity));
                layers.push(LayerSpec::normalization(w));
                layers.push(LayerSpec::activation(w, act));
            } else {
                layers.push(LayerSpec::dense(d, w, act));
            }
            d = w;
        }
        layers.push(LayerSpec::dense(d, k, Activation::Identity));
        let net = Network::new(layers).unwrap();
        if net.param_count() <= max_params {
            return net;
        }
    }
}

/// Glorot initialization plus noise on every parameter, so biases and offsets are nonzero.
pub fn random_params(net: &Network, rng: &mut ChaCha8Rng) -> ModelParameters {
    let mut p = net.init_params(rng);
    for layer in &mut p.layers {
        for v in layer.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    for buffer in &mut p.buffers {
        let half = buffer.len() / 2;
        for (i, v) in buffer.iter_mut().enumerate() {
            *v = if i < half {
                rng.random_range(-0.5..0.5)
            } else {
                rng.random_range(0.5..2.0)
            };
        }
    }
    p
}

pub fn random_batch(net: &Network, rows: usize, labeled: bool, rng: &mut ChaCha8Rng) -> Batch {
    let d = net.input_dim();
    let inputs: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = labeled.then(|| (0..rows).map(|_| rng.random_range(0..net.num_classes())).collect());
    Batch::new(inputs, d, labels).unwrap()
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

fn softmax_rows(logits: &[f64], k: usize) -> Vec<Vec<f64>> {
    logits
        .chunks_exact(k)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Loss recomputed from logits with textbook formulas. Pseudo-labels are passed in
/// so they stay fixed while parameters are perturbed.
pub fn reference_loss(
    net: &Network,
    params: &ModelParameters,
    batch: &Batch,
    loss: LossKind,
    targets: &[usize],
) -> f64 {
    let probs = softmax_rows(&forward_logits(net, params, batch).unwrap(), net.num_classes());
    let b = probs.len() as f64;
    let ce = probs.iter().zip(targets).map(|(p, &y)| -p[y].ln()).sum::<f64>() / b;
    match loss {
        LossKind::CrossEntropy | LossKind::PseudoLabel => ce,
        LossKind::ShotIm { shot_pl_weight } => {
            let cond = probs.iter().map(|p| entropy(p)).sum::<f64>() / b;
            let k = net.num_classes();
            let marginal: Vec<f64> = (0..k).map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / b).collect();
            cond - entropy(&marginal) + shot_pl_weight * ce
        }
    }
}

/// Targets the loss uses at `params`: labels for cross-entropy, argmax otherwise.
pub fn loss_targets(net: &Network, params: &ModelParameters, batch: &Batch, loss: LossKind) -> Vec<usize> {
    match loss {
        LossKind::CrossEntropy => batch.labels().unwrap().to_vec(),
        _ => softmax_rows(&forward_logits(net, params, batch).unwrap(), net.num_classes())
            .iter()
            .map(|p| argmax(p))
            .collect(),
    }
}

/// Central-difference gradient with step `h`.
pub fn numeric_gradient(
    net: &Network,
    params: &ModelParameters,
    batch: &Batch,
    loss: LossKind,
    h: f64,
) -> Vec<Vec<f64>> {
    let targets = loss_targets(net, params, batch, loss);
    let mut p = params.clone();
    let mut grads = Vec::with_capacity(params.layers.len());
    for l in 0..params.layers.len() {
        let mut g = Vec::with_capacity(params.layers[l].len());
        for i in 0..params.layers[l].len() {
            let orig = p.layers[l][i];
            p.layers[l][i] = orig + h;
            let up = reference_loss(net, &p, batch, loss, &targets);
            p.layers[l][i] = orig - h;
            let down = reference_loss(net, &p, batch, loss, &targets);
            p.layers[l][i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        grads.push(g);
    }
    grads
}

/// `|a - b| / max(|a|, |b|)` over the flattened gradient.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let flat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
    let (a, b) = (flat(a), flat(b));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let scale = norm(&a).max(norm(&b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const ALL_LOSSES: [LossKind; 3] = [
    LossKind::CrossEntropy,
    LossKind::PseudoLabel,
    LossKind::ShotIm { shot_pl_weight: 0.3 },
];

/// Worst relative gradient error over `nets` random networks and all losses.
pub fn gradient_check(nets: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..nets {
        let net = random_network(&mut rng, 2000);
        let params = random_params(&net, &mut rng);
        let rows = rng.random_range(1..=6);
        for loss in ALL_LOSSES {
            let batch = random_batch(&net, rows, loss.is_supervised(), &mut rng);
            let (_, analytic) = loss_and_gradients(&net, &params, &batch, loss).unwrap();
            let numeric = numeric_gradient(&net, &params, &batch, loss, 1e-5);
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Property checks shared by the property suite and the acceptance runner

pub const PROPERTY_CASES: u32 = 1000;

pub fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..48).prop_flat_map(|d| {
        (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        )
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Positive rescaling of `u` and `TD` together leaves the criterion unchanged.
pub fn check_scale_invariance((u, td): (Vec<f64>, Vec<f64>), log_c: f64) -> Result<(), TestCaseError> {
    let sum: Vec<f64> = u.iter().zip(&td).map(|(a, b)| a + b).collect();
    prop_assume!(norm(&u) > 1e-3 && norm(&sum) > 1e-3);
    let c = 10f64.powf(log_c);
    let scaled_u: Vec<f64> = u.iter().map(|v| v * c).collect();
    let scaled_td: Vec<f64> = td.iter().map(|v| v * c).collect();
    let a = cosine_alignment(&u, &td, 1e-12).unwrap();
    let b = cosine_alignment(&scaled_u, &scaled_td, 1e-12).unwrap();
    prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b} at scale {c}");
    prop_assert!((-1.0..=1.0).contains(&a));
    Ok(())
}

/// Random grouped proposal, live parameters and anchor for `decide`.
#[derive(Debug, Clone)]
pub struct DecideCase {
    pub proposal: Vec<Vec<f64>>,
    pub live: Vec<Vec<f64>>,
    pub anchor: Vec<Vec<f64>>,
    pub first_of_window: bool,
}

pub fn decide_case() -> impl Strategy<Value = DecideCase> {
    prop::collection::vec(1usize..5, 1..7)
        .prop_flat_map(|sizes| {
            let groups = |sizes: &[usize]| {
                sizes
                    .iter()
                    .map(|&n| prop::collection::vec(-2.0f64..2.0, n))
                    .collect::<Vec<_>>()
            };
            (
                groups(&sizes),
                groups(&sizes),
                groups(&sizes),
                prop::bool::weighted(0.1),
            )
        })
        .prop_map(|(proposal, live, anchor, first_of_window)| DecideCase {
            proposal,
            live,
            anchor,
            first_of_window,
        })
}

fn anchor_state(case: &DecideCase) -> AnchorState {
    AnchorState {
        anchor: case.anchor.clone(),
        last_reset_step: 20,
        step: if case.first_of_window { 20 } else { 27 },
    }
}

fn decide_with(case: &DecideCase, threshold: f64, granularity: Granularity) -> gala_core::gala::SelectionDecision {
    let cfg = GalaConfig {
        threshold,
        granularity,
        ..GalaConfig::default()
    };
    decide(
        &UpdateProposal(case.proposal.clone()),
        &case.live,
        &anchor_state(case),
        &cfg,
    )
    .unwrap()
}

pub const GRANULARITIES: [Granularity; 3] = [Granularity::SingleLayer, Granularity::Block, Granularity::MultiLayer];

/// At most one group outside window starts in single-layer and block modes; every
/// selected group clears the threshold; window starts select everything.
pub fn check_mask_exclusivity(case: DecideCase, threshold: f64, g: usize) -> Result<(), TestCaseError> {
    let granularity = GRANULARITIES[g];
    let d = decide_with(&case, threshold, granularity);
    prop_assert_eq!(d.mask.len(), case.proposal.len());
    prop_assert_eq!(d.skipped, !d.mask.iter().any(|&m| m));
    if case.first_of_window {
        prop_assert!(d.mask.iter().all(|&m| m));
        return Ok(());
    }
    if granularity != Granularity::MultiLayer {
        prop_assert!(d.mask.iter().filter(|&&m| m).count() <= 1);
    }
    for (m, c) in d.mask.iter().zip(&d.cosines) {
        if *m {
            prop_assert!(
                matches!(c, Some(v) if *v > threshold),
                "selected with cosine {c:?} at {threshold}"
            );
        }
    }
    if granularity == Granularity::MultiLayer {
        for (m, c) in d.mask.iter().zip(&d.cosines) {
            prop_assert_eq!(*m, matches!(c, Some(v) if *v > threshold));
        }
    }
    Ok(())
}

/// Raising the threshold never turns a skip into an update and never adds groups.
pub fn check_skip_monotonicity(case: DecideCase, lo: f64, hi: f64, g: usize) -> Result<(), TestCaseError> {
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let granularity = GRANULARITIES[g];
    let a = decide_with(&case, lo, granularity);
    let b = decide_with(&case, hi, granularity);
    if a.skipped {
        prop_assert!(b.skipped);
    }
    if granularity == Granularity::MultiLayer {
        for (ma, mb) in a.mask.iter().zip(&b.mask) {
            prop_assert!(!mb || *ma);
        }
    }
    Ok(())
}

/// Random small network, stream and GALA configuration.
#[derive(Debug, Clone)]
pub struct RunCase {
    pub seed: u64,
    pub threshold: f64,
    pub window: Option<u64>,
    pub granularity: usize,
    pub warmup_len: u64,
    pub steps: usize,
    pub shot: bool,
}

pub fn run_case() -> impl Strategy<Value = RunCase> {
    (
        any::<u64>(),
        -1.0f64..1.0,
        prop::option::weighted(0.8, 1u64..7),
        0usize..3,
        0u64..4,
        1usize..14,
        any::<bool>(),
    )
        .prop_map(
            |(seed, threshold, window, granularity, warmup_len, steps, shot)| RunCase {
                seed,
                threshold,
                window,
                granularity,
                warmup_len,
                steps,
                shot,
            },
        )
}

impl RunCase {
    pub fn gala_config(&self) -> GalaConfig {
        GalaConfig {
            threshold: self.threshold,
            window: self.window.map_or(Window::Infinite, Window::Steps),
            granularity: GRANULARITIES[self.granularity],
            blocks: 1,
            warmup_len: self.warmup_len,
            warmup_mode: if self.warmup_len == 0 {
                WarmupMode::None
            } else {
                WarmupMode::LinearRamp
            },
            epsilon: 1e-12,
        }
    }

    pub fn loss(&self) -> LossKind {
        if self.shot {
            LossKind::shot()
        } else {
            LossKind::PseudoLabel
        }
    }

    pub fn setup(&self) -> (Network, ModelParameters, Vec<Batch>) {
        let mut rng = seeded_rng(self.seed, 1);
        let net = random_network(&mut rng, 300);
        let params = random_params(&net, &mut rng);
        let batches = (0..self.steps)
            .map(|_| {
                let rows = rng.random_range(2..=5);
                random_batch(&net, rows, false, &mut rng)
            })
            .collect();
        (net, params, batches)
    }
}

/// Between resets, live minus anchor equals the sum of the masked, warm-up-scaled
/// updates applied since the last reset.
pub fn check_anchor_consistency(case: RunCase) -> Result<(), TestCaseError> {
    let (net, mut params, batches) = case.setup();
    let cfg = case.gala_config();
    let opt = OptimizerConfig::sgd(0.05);
    let mut gala = Gala::new(&net, &params, cfg, case.loss(), opt).unwrap();
    let grouping = gala.grouping().clone();
    let mut expected: Vec<Vec<f64>> = grouping
        .gather(&params.layers)
        .unwrap()
        .iter()
        .map(|g| vec![0.0; g.len()])
        .collect();
    let mut position = 0u64;
    for (i, batch) in batches.iter().enumerate() {
        position += 1;
        let (_, grads) = loss_and_gradients(&net, &params, batch, case.loss()).unwrap();
        let grouped = grouping.gather(&grads).unwrap();
        let out = gala.step(&net, &mut params, batch).unwrap();
        prop_assert_eq!(out.decision.first_of_window, position == 1);
        let scale = if case.warmup_len > 0 && position <= case.warmup_len {
            position as f64 / case.warmup_len as f64
        } else {
            1.0
        };
        for ((e, g), &m) in expected.iter_mut().zip(&grouped).zip(&out.decision.mask) {
            if m {
                for (ev, gv) in e.iter_mut().zip(g) {
                    *ev += scale * (-0.05 * gv);
                }
            }
        }
        let step = i as u64 + 1;
        if case.window.is_some_and(|s| step.is_multiple_of(s)) {
            prop_assert!(out.reset);
            expected.iter_mut().for_each(|e| e.fill(0.0));
            position = 0;
        } else {
            prop_assert!(!out.reset);
        }
        let live = grouping.gather(&params.layers).unwrap();
        for ((l, a), e) in live.iter().zip(&gala.anchor().anchor).zip(&expected) {
            for ((lv, av), ev) in l.iter().zip(a).zip(e) {
                prop_assert!(
                    ((lv - av) - ev).abs() <= 1e-9,
                    "td {} vs {} at step {step}",
                    lv - av,
                    ev
                );
            }
        }
    }
    Ok(())
}

/// Two runs from the same inputs produce bit-identical traces and parameters.
pub fn check_determinism(case: RunCase) -> Result<(), TestCaseError> {
    let run = || {
        let (net, mut params, batches) = case.setup();
        let mut gala = Gala::new(
            &net,
            &params,
            case.gala_config(),
            case.loss(),
            OptimizerConfig::sgd(0.05),
        )
        .unwrap();
        let mut trace = Vec::new();
        for b in &batches {
            let out = gala.step(&net, &mut params, b).unwrap();
            trace.push((
                out.decision,
                out.predictions,
                out.loss.to_bits(),
                out.warmup_scale.to_bits(),
            ));
        }
        let bits: Vec<u64> = params.layers.iter().flatten().map(|v| v.to_bits()).collect();
        (format!("{trace:?}"), bits)
    };
    prop_assert_eq!(run(), run());
    Ok(())
}
