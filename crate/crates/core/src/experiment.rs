//! Experiment configuration and the end-to-end run pipeline:
//! source task -> pretraining -> shifted stream -> adaptation -> metrics.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{run_stream, Adapter};
use crate::baselines::{oracle_sweep, Baseline, OracleResult, SelectorKind};
use crate::gala::{Gala, GalaConfig, Granularity, ParameterGrouping, Window};
use crate::metrics::{
    forgetting, generalization, selection_frequency, spearman_rank_correlation, tta_accuracy, MetricsSummary,
    RunRecord, SUMMARY_FORMAT_VERSION,
};
use crate::nn::{
    accuracy, pretrain_erm, LayerSpec, LossKind, ModelParameters, Network, OptimizerConfig, PretrainConfig,
};
use crate::shiftbench::{
    build_stream, generate_task, ShiftSpec, ShiftStream, SourceData, StreamMode, StreamSpec, TaskSpec,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub shifts: Vec<ShiftSpec>,
    pub mode: StreamMode,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Test-time selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorConfig {
    Gala(GalaConfig),
    Erm,
    AllLayers,
    RandomBlock {
        #[serde(default)]
        rng_seed: u64,
    },
    OracleBest,
    OracleWorst,
    AutoRgn,
}

impl SelectorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            SelectorConfig::Gala(_) => "gala",
            SelectorConfig::Erm => "erm",
            SelectorConfig::AllLayers => "all_layers",
            SelectorConfig::RandomBlock { .. } => "random_block",
            SelectorConfig::OracleBest => "oracle_best",
            SelectorConfig::OracleWorst => "oracle_worst",
            SelectorConfig::AutoRgn => "auto_rgn",
        }
    }

    fn baseline_kind(&self, seed: u64) -> Option<SelectorKind> {
        Some(match self {
            SelectorConfig::Gala(_) => return None,
            SelectorConfig::Erm => SelectorKind::Erm,
            SelectorConfig::AllLayers => SelectorKind::AllLayers,
            SelectorConfig::RandomBlock { rng_seed } => SelectorKind::RandomBlock {
                rng_seed: rng_seed ^ seed.rotate_left(17),
            },
            SelectorConfig::OracleBest => SelectorKind::OracleBest,
            SelectorConfig::OracleWorst => SelectorKind::OracleWorst,
            SelectorConfig::AutoRgn => SelectorKind::AutoRgn,
        })
    }
}

/// Table-style ablation: each listed value is run with every other setting fixed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub threshold: Vec<f64>,
    pub window: Vec<Window>,
    pub granularity: Vec<Granularity>,
    pub batch_size: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub t_values: Vec<f64>,
    pub u_values: Vec<f64>,
    pub beta_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub stream: StreamConfig,
    pub model: Vec<LayerSpec>,
    pub pretrain: PretrainSettings,
    pub loss: LossKind,
    pub selector: SelectorConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Blocks for baseline and oracle grouping; per-layer groups when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_blocks: Option<usize>,
    /// Also run an oracle sweep and report rank correlation against it.
    #[serde(default)]
    pub oracle_rank: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryConfig>,
}

impl ExperimentConfig {
    pub fn network(&self) -> Result<Network> {
        let net = Network::new(self.model.clone())?;
        if net.input_dim() != self.task.input_dim {
            return Err(Error::config(format!(
                "model: first layer expects {} inputs, task.input_dim is {}",
                net.input_dim(),
                self.task.input_dim
            )));
        }
        if net.num_classes() != self.task.num_classes {
            return Err(Error::config(format!(
                "model: last layer emits {} classes, task.num_classes is {}",
                net.num_classes(),
                self.task.num_classes
            )));
        }
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(in_section("task"))?;
        self.network()?;
        self.loss.validate().map_err(in_section("loss"))?;
        if self.loss.is_supervised() {
            return Err(Error::config(
                "loss: test-time adaptation needs pseudo_label or shot_im",
            ));
        }
        self.optimizer.validate().map_err(in_section("optimizer"))?;
        OptimizerConfig::sgd(self.pretrain.learning_rate)
            .validate()
            .map_err(|_| Error::config("pretrain.learning_rate must be finite and positive"))?;
        if self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size must be positive"));
        }
        if let SelectorConfig::Gala(g) = &self.selector {
            g.validate().map_err(in_section("selector"))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        Ok(())
    }

    /// Task with its data seed mixed with the job seed.
    pub fn task_for_seed(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            seed: mix(self.task.seed, seed),
            ..self.task
        }
    }

    pub fn stream_spec(&self, seed: u64) -> StreamSpec {
        StreamSpec {
            shifts: self.stream.shifts.clone(),
            mode: self.stream.mode,
            batch_size: self.stream.batch_size,
            seed: mix(self.task.seed ^ 0x9e37_79b9_7f4a_7c15, seed),
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            optimizer: OptimizerConfig::sgd(self.pretrain.learning_rate),
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            seed,
        }
    }

    /// Hash of everything that determines a run, excluding seeds and paths.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.seeds.clear();
        canonical.output_dir = None;
        canonical.sweep = None;
        canonical.geometry = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn baseline_grouping(&self, net: &Network) -> Result<ParameterGrouping> {
        match self.baseline_blocks {
            Some(b) => ParameterGrouping::blocks(net, b),
            None => Ok(ParameterGrouping::single_layer(net)),
        }
    }

    /// One labeled variant per sweep value.
    pub fn sweep_variants(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::config("sweep: section missing"))?;
        let gala = match &self.selector {
            SelectorConfig::Gala(g) => Some(*g),
            _ => None,
        };
        let need_gala = || gala.ok_or_else(|| Error::config("sweep: threshold/window/granularity need selector gala"));
        let mut out = Vec::new();
        for &t in &sweep.threshold {
            let mut c = self.clone();
            c.selector = SelectorConfig::Gala(GalaConfig {
                threshold: t,
                ..need_gala()?
            });
            out.push((format!("threshold={t}"), c));
        }
        for &w in &sweep.window {
            let mut c = self.clone();
            c.selector = SelectorConfig::Gala(GalaConfig {
                window: w,
                ..need_gala()?
            });
            out.push((format!("window={w}"), c));
        }
        for &g in &sweep.granularity {
            let mut c = self.clone();
            c.selector = SelectorConfig::Gala(GalaConfig {
                granularity: g,
                ..need_gala()?
            });
            out.push((format!("granularity={g}"), c));
        }
        for &b in &sweep.batch_size {
            let mut c = self.clone();
            c.stream.batch_size = b;
            out.push((format!("batch_size={b}"), c));
        }
        if out.is_empty() {
            return Err(Error::config("sweep: no values listed"));
        }
        for (_, c) in &out {
            c.validate()?;
        }
        Ok(out)
    }
}

/// Qualifies a nested config error with the section it came from.
fn in_section(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::Config(format!("{section}.{msg}")),
        other => other,
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Source data, pretrained model and target stream for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub net: Network,
    pub source: SourceData,
    pub pretrained: ModelParameters,
    pub val_accuracy: f64,
    pub stream: ShiftStream,
}

pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<(Network, SourceData, ModelParameters, f64)> {
    cfg.validate()?;
    let net = cfg.network()?;
    let source = generate_task(&cfg.task_for_seed(seed))?;
    let out = pretrain_erm(&net, &source.train, &source.holdout, &cfg.pretrain_config(seed))?;
    Ok((net, source, out.params, out.val_accuracy))
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let (net, source, pretrained, val_accuracy) = pretrain(cfg, seed)?;
    let stream = build_stream(&cfg.task_for_seed(seed), &cfg.stream_spec(seed))?;
    Ok(Prepared {
        net,
        source,
        pretrained,
        val_accuracy,
        stream,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub summary: MetricsSummary,
    pub oracle: Option<OracleResult>,
}

/// Adapts the pretrained model over the stream with the configured selector.
pub fn adapt(
    cfg: &ExperimentConfig,
    net: &Network,
    pretrained: &ModelParameters,
    stream: &ShiftStream,
    seed: u64,
    label: &str,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let batches = stream.adapt_batches();
    let grouping = cfg.baseline_grouping(net)?;
    let needs_oracle =
        cfg.oracle_rank || matches!(cfg.selector, SelectorConfig::OracleBest | SelectorConfig::OracleWorst);
    let oracle = if needs_oracle {
        Some(oracle_sweep(
            net,
            pretrained,
            &batches,
            cfg.loss,
            cfg.optimizer,
            &grouping,
        )?)
    } else {
        None
    };

    let mut adapter: Box<dyn Adapter> = match &cfg.selector {
        SelectorConfig::Gala(g) => Box::new(Gala::new(net, pretrained, *g, cfg.loss, cfg.optimizer)?),
        other => {
            let kind = other.baseline_kind(seed).expect("baseline selector");
            Box::new(Baseline::new(
                kind.resolve(oracle.as_ref())?,
                grouping,
                cfg.loss,
                cfg.optimizer,
            )?)
        }
    };
    let mut params = pretrained.clone();
    let steps = run_stream(adapter.as_mut(), net, &mut params, &batches)?;
    let group_names = adapter.group_names();

    let target_holdout = stream.target_holdout()?;
    let frequency = selection_frequency(&steps, group_names.len());
    let rank_correlation = match &oracle {
        Some(o) if o.accuracies.len() == frequency.len() => spearman_rank_correlation(&o.accuracies, &frequency).ok(),
        _ => None,
    };
    let summary = MetricsSummary {
        format_version: SUMMARY_FORMAT_VERSION,
        label: label.to_string(),
        seed,
        fingerprint: cfg.fingerprint(),
        tta_acc: tta_accuracy(&steps)?,
        generalization: generalization(net, &params, &target_holdout)?,
        forgetting: forgetting(net, pretrained, &params, &stream.source_holdout)?,
        erm_generalization: accuracy(net, pretrained, &target_holdout)?,
        rank_correlation,
        group_names: group_names.clone(),
        selection_frequency: frequency,
        steps: steps.len(),
        skipped_steps: steps.iter().filter(|s| s.skipped).count(),
    };
    let record = RunRecord {
        steps,
        group_names,
        final_params: params,
        fingerprint: summary.fingerprint.clone(),
        seed,
    };
    Ok(RunOutcome {
        record,
        summary,
        oracle,
    })
}

/// `prepare` followed by `adapt`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, label: &str) -> Result<RunOutcome> {
    let p = prepare(cfg, seed)?;
    adapt(cfg, &p.net, &p.pretrained, &p.stream, seed, label)
}
