use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod jobs;

#[derive(Parser, Debug)]
#[command(name = "rewind", version, about = "Pruning-with-rewinding experiments, difficulty scores and loss-landscape probes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON job description.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one dense network and save its checkpoints and log.
    Train,
    /// Run an IMP experiment and write its sparsity curve.
    Imp,
    /// Compute EL2N difficulty scores.
    El2n,
    /// Compute per-example loss-barrier (LMC) scores.
    LmcScore,
    /// Per-example loss barriers between children of one parent, or between two checkpoints.
    Barrier,
    /// Locate the onset of linear mode connectivity over a grid of steps.
    Onset,
    /// Warmup length × warmup subset sweep.
    WarmupSweep,
    /// Compare two sparsity curves (curve.json or curve.csv).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Tolerance in pooled standard errors.
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
    },
    /// Write CSV and SVG figures for a results directory (defaults to --out).
    Export { dir: Option<PathBuf> },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let c = &cli.common;
    match cli.command {
        Command::Train => jobs::train(c),
        Command::Imp => jobs::imp(c),
        Command::El2n => jobs::el2n(c),
        Command::LmcScore => jobs::lmc_score(c),
        Command::Barrier => jobs::barrier(c),
        Command::Onset => jobs::onset(c),
        Command::WarmupSweep => jobs::warmup_sweep(c),
        Command::Compare { a, b, tolerance } => jobs::compare(c, &a, &b, tolerance),
        Command::Export { dir } => jobs::export(dir.as_deref().unwrap_or(&c.out)),
    }
}
