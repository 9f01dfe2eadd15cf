use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use paraconf::pipeline::{run_until, RunConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(
    name = "paraconf",
    version,
    about = "Pretrain, probe and analyze Conformer speech encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the configured corpora.
    Synth(Common),
    /// Pretrain every configured model.
    Pretrain(Common),
    /// Extract clip embeddings for every model, layer and window policy.
    Extract(Common),
    /// Fit linear probes and score them.
    Probe(Common),
    /// CKA grids, attention distances, layer curves and disagreement.
    Analyze(Common),
    /// Write the run report from the stage outputs.
    Report(Common),
    /// All stages.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use one worker thread.
    #[arg(long)]
    single_thread: bool,
    /// Skip unreadable WAV files instead of failing.
    #[arg(long)]
    skip_bad: bool,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::Synth(c) => (Stage::Synth, c),
        Command::Pretrain(c) => (Stage::Pretrain, c),
        Command::Extract(c) => (Stage::Extract, c),
        Command::Probe(c) => (Stage::Probe, c),
        Command::Analyze(c) => (Stage::Analyze, c),
        Command::Report(c) | Command::Run(c) => (Stage::Report, c),
    };
    match execute(stage, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(stage: Stage, c: Common) -> anyhow::Result<()> {
    if c.single_thread {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = RunConfig::load(&c.config).with_context(|| format!("reading config {}", c.config.display()))?;
    let opts = RunOptions {
        seed: c.seed,
        out: c.out,
        skip_bad: c.skip_bad,
    };
    let (report, error) = run_until(cfg, &opts, stage);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if let Some(e) = error {
        return Err(e.into());
    }
    let cached = report.stages.iter().filter(|s| s.cached).count();
    log::info!(
        "done: {} stage units ({cached} cached) in {:.1}s, outputs in {}",
        report.stages.len(),
        report.wall_clock(),
        report.output_dir.display()
    );
    if stage == Stage::Report {
        println!("{}", report.output_dir.join("report.md").display());
    }
    Ok(())
}
