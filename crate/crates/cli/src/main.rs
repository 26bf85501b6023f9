use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use palette_core::harness::{run_stages, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "palette", version, about = "Latent-prefix exploration on a toy policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining, training, RL and test task splits.
    GenData(Common),
    /// Pretrain the base policy.
    Pretrain(Common),
    /// Train the VAE and fit per-domain regions.
    TrainVae(Common),
    /// Supervised warm-up with single-row prior prefixes.
    Sft(Common),
    /// Scheduled GRPO/RLOO from the SFT checkpoint.
    Rl(Common),
    /// Write eval_report.csv.
    Eval(Common),
    /// Write latent/prefix exports, PCA, probe and diversity tables.
    Analyze(Common),
    /// Every stage in order.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stages, c): (&[Stage], Common) = match cli.command {
        Command::GenData(c) => (&[Stage::GenData], c),
        Command::Pretrain(c) => (&[Stage::Pretrain], c),
        Command::TrainVae(c) => (&[Stage::TrainVae], c),
        Command::Sft(c) => (&[Stage::Sft], c),
        Command::Rl(c) => (&[Stage::Rl], c),
        Command::Eval(c) => (&[Stage::Eval], c),
        Command::Analyze(c) => (&[Stage::Analyze], c),
        Command::Run(c) => (&Stage::ALL, c),
    };
    let opts = RunOptions { seed: c.seed, out_dir: c.out, force: c.force };
    match run_stages(&c.config, stages, &opts).with_context(|| format!("config {}", c.config.display())) {
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
