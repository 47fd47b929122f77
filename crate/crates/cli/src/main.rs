use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nptl::NptlError;

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "nptl", version, about = "Nonparametric transfer learning pipeline")]
pub struct Cli {
    /// Experiment config (JSON); the built-in shifted-mixture benchmark when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for sampling and searches; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate or load the upstream and downstream data and split it.
    GenData,
    /// Train the upstream network.
    Pretrain,
    /// Linear-probe the pretrained network on the downstream train split.
    Probe,
    /// Pick the prior strength by validation NLL over the alpha grid.
    SweepAlpha,
    /// Draw the posterior ensemble and, unless skipped, the fine-tuning baselines.
    Sample(SampleArgs),
    /// Score ensembles on the test split and append rows to results.csv.
    Evaluate(EvaluateArgs),
    /// Greedy weight soup of the posterior ensemble.
    Soup(EvaluateArgs),
    /// Weight-law diagnostics and the sandwich covariance check.
    Diagnose(DiagnoseArgs),
    /// Aggregate results.csv into per-method mean and std.
    Report,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Only draw the posterior ensemble.
    #[arg(long)]
    no_baselines: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Ensemble directory; every directory under `ensembles/` when absent.
    #[arg(long)]
    ensemble: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Draws per law in the distribution tests.
    #[arg(long)]
    samples: Option<usize>,
}

/// 2 for configuration and validation errors, 3 when every member diverged.
fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|c| c.downcast_ref::<NptlError>());
    match core {
        Some(NptlError::AllMembersDiverged { .. }) => 3,
        Some(NptlError::InvalidArgument(_) | NptlError::Format { .. } | NptlError::Json(_)) => 2,
        Some(NptlError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
