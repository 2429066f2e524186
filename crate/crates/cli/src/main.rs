//! `ambient`: generate corrupted datasets, train, sample, restore and
//! evaluate from one TOML config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use ambient::sampler::SamplerKind;
use ambient::training::Objective;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ambient", version, about = "Diffusion training from corrupted data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; replaces the config's data, train and sample seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides AMBIENT_OUT_DIR and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw clean data, measure it once, write dataset and reference files.
    GenData(Common),
    /// Train a denoiser on the dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
    },
    /// Generate samples with the trained model (or the oracle).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_sampler)]
        sampler: Option<SamplerKind>,
        /// Use the exact posterior mean instead of the trained model.
        #[arg(long)]
        oracle: bool,
    },
    /// One-step restoration PSNR of the model, the oracle and a prior-mean fill.
    Restore(Common),
    /// Distances of the samples to fresh data and the memorisation statistic.
    Eval(Common),
    /// Compare the mixture score with Tweedie's score from the posterior mean.
    OracleCheck(Common),
    /// Monte Carlo versus closed-form E[AᵀA | Ã].
    DiagnoseMoment {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: ambient::Error| e.to_string())
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse().map_err(|e: ambient::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train { common, steps, objective } => commands::train(&common, steps, objective),
        Command::Sample { common, sampler, oracle } => commands::sample(&common, sampler, oracle),
        Command::Restore(c) => commands::restore(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::OracleCheck(c) => commands::oracle_check(&c),
        Command::DiagnoseMoment { common, draws } => commands::diagnose_moment(&common, draws),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let usage = matches!(e.downcast_ref::<ambient::Error>(), Some(ambient::Error::Config(_)));
            eprintln!("error: {e:#}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
