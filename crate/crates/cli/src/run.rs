use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use gala_core::baselines::oracle_sweep;
use gala_core::experiment::{self, ExperimentConfig};
use gala_core::metrics::{
    aggregate, geometry_grid, read_trace, selection_frequency, tta_accuracy, write_aggregate_csv, write_trace,
    MetricsSummary, SUMMARY_FORMAT_VERSION,
};
use gala_core::nn::{Checkpoint, PretrainMeta, CHECKPOINT_FORMAT_VERSION};
use gala_core::shiftbench::{build_stream, ShiftStream, StreamManifest, MANIFEST_FORMAT_VERSION};
use serde::Serialize;

use crate::RunArgs;

pub const MANIFEST_FILE: &str = "manifest.json";
const RUN_MANIFEST_VERSION: u32 = 1;
const DEFAULT_ROOT: &str = "runs";

pub fn output_root(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map_or_else(|| PathBuf::from(DEFAULT_ROOT), Path::to_path_buf)
}

#[derive(Debug, Serialize)]
struct Formats {
    run_manifest: u32,
    checkpoint: u32,
    stream_manifest: u32,
    summary: u32,
    trace: u32,
}

/// Written last into every command directory; lists every file the command produced.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    gala_lab_version: &'static str,
    gala_core_version: &'static str,
    formats: Formats,
    fingerprint: Option<String>,
    seeds: Vec<u64>,
    config: Option<&'a ExperimentConfig>,
    artifacts: Vec<String>,
}

/// A command directory being (re)written. Stale outputs from an earlier run are removed
/// first, but only when that directory carries our manifest.
struct OutDir {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl OutDir {
    fn create(root: PathBuf) -> Result<Self> {
        if root.exists() {
            ensure!(
                root.join(MANIFEST_FILE).is_file(),
                "{} exists but was not written by gala-lab; refusing to overwrite it",
                root.display()
            );
            fs::remove_dir_all(&root).with_context(|| format!("cannot clear {}", root.display()))?;
        }
        fs::create_dir_all(&root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self {
            root,
            artifacts: Vec::new(),
        })
    }

    /// Registers `rel` as an artifact and returns its absolute path, creating parents.
    fn file(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.artifacts.push(rel.to_string());
        Ok(path)
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.file(rel)?;
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    fn finish(mut self, command: &str, config: Option<&ExperimentConfig>) -> Result<PathBuf> {
        self.artifacts.sort();
        let manifest = RunManifest {
            command,
            gala_lab_version: env!("CARGO_PKG_VERSION"),
            gala_core_version: gala_core::VERSION,
            formats: Formats {
                run_manifest: RUN_MANIFEST_VERSION,
                checkpoint: CHECKPOINT_FORMAT_VERSION,
                stream_manifest: MANIFEST_FORMAT_VERSION,
                summary: SUMMARY_FORMAT_VERSION,
                trace: 1,
            },
            fingerprint: config.map(ExperimentConfig::fingerprint),
            seeds: config.map(|c| c.seeds.clone()).unwrap_or_default(),
            config,
            artifacts: self.artifacts,
        };
        fs::write(
            self.root.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(self.root)
    }
}

fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

pub fn checkpoint_path(root: &Path, seed: u64) -> PathBuf {
    root.join("pretrain").join(seed_dir(seed)).join("checkpoint.json")
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    cfg.validate()
        .with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

pub struct Job {
    cfg: ExperimentConfig,
    root: PathBuf,
    trace: bool,
}

impl Job {
    pub fn new(args: &RunArgs) -> Result<Self> {
        let mut cfg = load_config(&args.config)?;
        if let Some(seed) = args.seed {
            cfg.seeds = vec![seed];
        }
        let root = output_root(args.out.out.as_deref(), cfg.output_dir.as_deref());
        Ok(Self {
            cfg,
            root,
            trace: args.trace || !args.no_trace,
        })
    }

    pub fn pretrain(&self) -> Result<PathBuf> {
        let mut out = OutDir::create(self.root.join("pretrain"))?;
        for &seed in &self.cfg.seeds {
            let (net, _, params, val_accuracy) = experiment::pretrain(&self.cfg, seed)?;
            let meta = PretrainMeta {
                config: self.cfg.pretrain_config(seed),
                val_accuracy,
            };
            let ckpt = Checkpoint::new(net, params, seed, meta)?;
            let dir = seed_dir(seed);
            out.write(&format!("{dir}/checkpoint.json"), &ckpt.to_json()?)?;
            let stream = self.stream(&self.cfg, seed)?;
            stream.manifest().save(&out.file(&format!("{dir}/stream.json"))?)?;
            stream.write_csv(&out.file(&format!("{dir}/stream.csv"))?)?;
        }
        out.finish("pretrain", Some(&self.cfg))
    }

    pub fn adapt(&self) -> Result<PathBuf> {
        let label = self.cfg.selector.name();
        let mut out = OutDir::create(self.root.join("adapt").join(label))?;
        let summaries = self.adapt_all(&self.cfg, label, &mut out, "")?;
        write_aggregate(&mut out, &summaries)?;
        out.finish("adapt", Some(&self.cfg))
    }

    pub fn sweep(&self) -> Result<PathBuf> {
        let variants = self.cfg.sweep_variants()?;
        let mut out = OutDir::create(self.root.join("sweep"))?;
        let mut summaries = Vec::new();
        for (label, cfg) in &variants {
            summaries.extend(self.adapt_all(cfg, label, &mut out, &format!("{label}/"))?);
        }
        write_aggregate(&mut out, &summaries)?;
        out.finish("sweep", Some(&self.cfg))
    }

    pub fn oracle(&self) -> Result<PathBuf> {
        let mut out = OutDir::create(self.root.join("oracle"))?;
        for &seed in &self.cfg.seeds {
            let ckpt = self.checkpoint(seed)?;
            let stream = self.stream(&self.cfg, seed)?;
            let grouping = self.cfg.baseline_grouping(&ckpt.network)?;
            let result = oracle_sweep(
                &ckpt.network,
                &ckpt.params,
                &stream.adapt_batches(),
                self.cfg.loss,
                self.cfg.optimizer,
                &grouping,
            )?;
            let dir = seed_dir(seed);
            out.write(&format!("{dir}/oracle.json"), &serde_json::to_string_pretty(&result)?)?;
            stream.manifest().save(&out.file(&format!("{dir}/stream.json"))?)?;
        }
        out.finish("oracle", Some(&self.cfg))
    }

    pub fn geometry(&self) -> Result<PathBuf> {
        let Some(g) = &self.cfg.geometry else {
            bail!("geometry: section missing from the config");
        };
        let grid = geometry_grid(&g.t_values, &g.u_values, &g.beta_values)?;
        let mut out = OutDir::create(self.root.join("geometry"))?;
        grid.write_csv(BufWriter::new(File::create(out.file("grid.csv")?)?))?;
        out.finish("geometry", Some(&self.cfg))
    }

    fn adapt_all(
        &self,
        cfg: &ExperimentConfig,
        label: &str,
        out: &mut OutDir,
        prefix: &str,
    ) -> Result<Vec<MetricsSummary>> {
        let mut summaries = Vec::new();
        for &seed in &self.cfg.seeds {
            let ckpt = self.checkpoint(seed)?;
            let stream = self.stream(cfg, seed)?;
            let run = experiment::adapt(cfg, &ckpt.network, &ckpt.params, &stream, seed, label)?;
            let dir = format!("{prefix}{}", seed_dir(seed));
            out.write(&format!("{dir}/summary.json"), &(run.summary.to_json()? + "\n"))?;
            stream.manifest().save(&out.file(&format!("{dir}/stream.json"))?)?;
            if self.trace {
                write_trace(
                    BufWriter::new(File::create(out.file(&format!("{dir}/trace.csv"))?)?),
                    &run.record.steps,
                )?;
            }
            summaries.push(run.summary);
        }
        Ok(summaries)
    }

    fn stream(&self, cfg: &ExperimentConfig, seed: u64) -> Result<ShiftStream> {
        Ok(build_stream(&cfg.task_for_seed(seed), &cfg.stream_spec(seed))?)
    }

    /// Loads the seed's checkpoint and checks it was trained under this config.
    fn checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let path = checkpoint_path(&self.root, seed);
        if !path.is_file() {
            bail!(
                "no checkpoint for seed {seed}: expected {}; run `gala-lab pretrain` with the same config and --out first",
                path.display()
            );
        }
        let ckpt = Checkpoint::load(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
        let stale = ckpt.network != self.cfg.network()?
            || ckpt.seed != seed
            || ckpt.pretrain.config != self.cfg.pretrain_config(seed)
            || StreamManifest::load(&path.with_file_name("stream.json"))
                .map_or(true, |m| m.task != self.cfg.task_for_seed(seed));
        ensure!(
            !stale,
            "checkpoint {} was trained with a different model, task or pretrain setting; rerun `gala-lab pretrain`",
            path.display()
        );
        Ok(ckpt)
    }
}

fn write_aggregate(out: &mut OutDir, summaries: &[MetricsSummary]) -> Result<()> {
    let path = out.file("aggregate.csv")?;
    write_aggregate_csv(File::create(&path)?, &aggregate(summaries))?;
    Ok(())
}

/// Every `summary.json` under `adapt/` and `sweep/`, in path order.
fn find_summaries(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, found)?;
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                found.push(path);
            }
        }
        Ok(())
    }
    let mut found = Vec::new();
    for sub in ["adapt", "sweep"] {
        let dir = root.join(sub);
        if dir.is_dir() {
            walk(&dir, &mut found)?;
        }
    }
    Ok(found)
}

/// Rebuilds `report/aggregate.csv` from the summaries on disk, checking each summary's
/// accuracy and selection frequencies against its trace when one exists.
pub fn report(root: &Path) -> Result<PathBuf> {
    let paths = find_summaries(root)?;
    ensure!(
        !paths.is_empty(),
        "no summaries under {}; run `gala-lab adapt` or `gala-lab sweep` first",
        root.display()
    );
    let mut summaries = Vec::new();
    for path in &paths {
        let text = fs::read_to_string(path)?;
        let summary = MetricsSummary::from_json(&text).with_context(|| format!("cannot parse {}", path.display()))?;
        let trace = path.with_file_name("trace.csv");
        if trace.is_file() {
            let steps = read_trace(File::open(&trace)?).with_context(|| format!("cannot parse {}", trace.display()))?;
            ensure!(
                steps.len() == summary.steps
                    && tta_accuracy(&steps)? == summary.tta_acc
                    && selection_frequency(&steps, summary.group_names.len()) == summary.selection_frequency,
                "{} disagrees with {}",
                trace.display(),
                path.display()
            );
        }
        summaries.push(summary);
    }
    let mut out = OutDir::create(root.join("report"))?;
    write_aggregate(&mut out, &summaries)?;
    let sources: Vec<String> = paths
        .iter()
        .map(|p| p.strip_prefix(root).unwrap_or(p).display().to_string())
        .collect();
    out.write("sources.txt", &(sources.join("\n") + "\n"))?;
    out.finish("report", None)
}
