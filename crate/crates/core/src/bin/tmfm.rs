//! Command-line runner for the experiment harness.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime or numerical error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tmfm::harness::{run_experiment, ExperimentConfig, ExperimentKind};
use tmfm::Error;

#[derive(Parser)]
#[command(name = "tmfm", version, about = "FM vs. TM sampler experiments on Gaussian targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// KL vs. modeled cost on a unimodal target (closed form and Monte Carlo).
    UnimodalKl(RunArgs),
    /// Nearest-neighbour KL vs. modeled cost on mixture targets.
    MixtureKl(RunArgs),
    /// Cosine-similarity histograms of posterior difference draws.
    PosteriorHist(RunArgs),
    /// Randomized soundness checks of the mixture bounds.
    BoundsCheck(RunArgs),
    /// Modeled cost and inner-step trade-off table.
    CostModel(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn run(kind: ExperimentKind, args: RunArgs) -> Result<(), Error> {
    let mut config = ExperimentConfig::from_path(&args.config)?;
    if config.kind != kind {
        return Err(Error::Config(format!(
            "config is for {} but the {} subcommand was used",
            config.kind.as_str(),
            kind.as_str().replace('_', "-")
        )));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    let manifest = run_experiment(&config, &out)?;
    for a in &manifest.artifacts {
        println!("{}", out.join(&a.path).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::UnimodalKl(a) => (ExperimentKind::UnimodalKl, a),
        Command::MixtureKl(a) => (ExperimentKind::MixtureKl, a),
        Command::PosteriorHist(a) => (ExperimentKind::PosteriorHist, a),
        Command::BoundsCheck(a) => (ExperimentKind::BoundsCheck, a),
        Command::CostModel(a) => (ExperimentKind::CostModel, a),
    };
    match run(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
