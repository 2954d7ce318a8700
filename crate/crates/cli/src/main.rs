mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Test-time adaptation experiments with gradient-aligned layer selection.
#[derive(Debug, Parser)]
#[command(name = "gala-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the source model for every seed and save checkpoints.
    Pretrain(RunArgs),
    /// Adapt saved checkpoints over the shifted stream with the configured selector.
    Adapt(RunArgs),
    /// Per-group oracle sweep: adapt one group at a time and rank groups by accuracy.
    Oracle(RunArgs),
    /// Run every value of the config's `[sweep]` section as its own adaptation.
    Sweep(RunArgs),
    /// Tabulate the cosine criterion over the config's `[geometry]` grid.
    Geometry(RunArgs),
    /// Recheck summaries against traces and rebuild the aggregate table.
    Report(OutArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output root. Falls back to the config's `output_dir`, then `runs`.
    #[arg(long, env = "GALA_LAB_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only, instead of the config's `seeds`.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
    /// Write per-step decision traces (default).
    #[arg(long, overrides_with = "no_trace")]
    trace: bool,
    /// Skip decision traces.
    #[arg(long, overrides_with = "trace")]
    no_trace: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => run::Job::new(&a).and_then(|j| j.pretrain()),
        Command::Adapt(a) => run::Job::new(&a).and_then(|j| j.adapt()),
        Command::Oracle(a) => run::Job::new(&a).and_then(|j| j.oracle()),
        Command::Sweep(a) => run::Job::new(&a).and_then(|j| j.sweep()),
        Command::Geometry(a) => run::Job::new(&a).and_then(|j| j.geometry()),
        Command::Report(a) => run::report(&run::output_root(a.out.as_deref(), None)),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
