use std::path::PathBuf;
use std::process::ExitCode;

use affect_core::harness::{Run, RunConfig, StageReport};
use affect_core::temporal::sampling_matrix_csv;
use affect_core::train::{Checkpoint, BEST_CHECKPOINT};
use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "affect",
    version,
    about = "Continuous valence/arousal pipeline over a run directory"
)]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Crop, align and equalize face, eye and mouth regions.
    Preprocess,
    /// Train the key-frame selector and pick key frames for every clip.
    Keyframes,
    /// Horn-Schunck flow between consecutive key frames.
    Flow,
    /// Train the regression network.
    Train,
    /// Score the best checkpoint on the test split.
    Eval,
    /// Print the stored evaluation report.
    Report,
    /// Every stage from synth to eval.
    Run,
    /// Dump the learned temporal filter weights as CSV.
    Filters {
        /// Sequence length to evaluate the filters at.
        #[arg(long, default_value_t = 10)]
        frames: usize,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.set(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print(r: &StageReport) {
    let tag = if r.skipped { "skip" } else { "done" };
    println!("[{tag}] {:<10} {}", r.stage, r.summary);
}

fn filters_csv(run: &Run, frames: usize) -> anyhow::Result<String> {
    let path = run.model_dir().join(BEST_CHECKPOINT);
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(sampling_matrix_csv(&ck.model.filters, frames))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let cfg = config(&cli)?;
    let run = Run::new(cfg, &cli.out, cli.force)?;
    match cli.command {
        Command::Synth => print(&run.synth()?),
        Command::Preprocess => print(&run.preprocess()?),
        Command::Keyframes => print(&run.keyframes()?),
        Command::Flow => print(&run.flow()?),
        Command::Train => print(&run.train()?),
        Command::Eval => print(&run.eval()?),
        Command::Report => print!("{}", run.report()?),
        Command::Run => {
            for r in run.all()? {
                print(&r);
            }
            print!("{}", run.report()?);
        }
        Command::Filters { frames } => print!("{}", filters_csv(&run, frames)?),
        Command::Config => print!("{}", toml::to_string_pretty(&run.config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
