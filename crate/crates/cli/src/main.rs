//! `bmi`: dataset generation, latent model training, policy pre-training,
//! bi-level fine-tuning and evaluation.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid config or input,
//! 3 training divergence, 4 missing artifact.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bmi_core::Error;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "bmi", version, about = "Latent motion models, tracking policies and bi-level fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Zero wall-clock log columns so reruns match byte for byte.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus or import a dataset.
    GenData,
    /// Train the latent model for every configured beta.
    TrainScae {
        /// Continue from saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// Pre-train the tracking policy.
    Pretrain,
    /// Bi-level fine-tuning of policy and decoder.
    Bmi,
    /// Metrics and plot data.
    Eval,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_)
        | Error::Config(_)
        | Error::Parse { .. }
        | Error::Shape { .. }
        | Error::TrajectoryTooShort { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> bmi_core::Result<()> {
    let mut overrides = RunConfig::env_overrides();
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &cli.out {
        overrides.push(("out".into(), toml::Value::String(o.display().to_string()).to_string()));
    }
    if cli.deterministic {
        overrides.push(("deterministic".into(), "true".into()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    cfg.write_resolved(&cfg.out)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainScae { resume } => commands::train_scae(&cfg, resume),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Bmi => commands::bmi(&cfg),
        Command::Eval => commands::eval(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
