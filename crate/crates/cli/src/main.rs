//! `mcd`: calibration, duality checks, training, sampling and evaluation for
//! masked consistency distillation on a synthetic text source.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcd_core::config::{key_help, RunConfig};
use mcd_core::pipeline::{self, RunStatus};
use mcd_core::Error;

#[derive(Debug, Parser)]
#[command(name = "mcd", version, about = "Masked diffusion duality and consistency distillation workbench")]
#[command(after_help = after_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (key = value lines, `#` comments).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate the latent SNR calibration (calibration.csv).
    Calibrate {
        /// Extended vocabulary size; same as --set calibrate.vocab=K.
        #[arg(long = "K", visible_alias = "k", value_name = "K")]
        k: Option<usize>,
    },
    /// Monte Carlo checks of the discrete/latent duality (duality_report.csv).
    Verify,
    /// Train the teacher denoiser (teacher.mcd, pretrain_metrics.csv).
    Pretrain,
    /// Consistency distillation rounds (student_r{n}.mcd, distill_metrics.csv).
    Distill,
    /// Generate sequences from a checkpoint (samples.txt).
    Sample,
    /// Oracle-perplexity grid over checkpoints (eval_report.csv).
    Eval,
    /// Pretrain, distill and evaluate end to end (table2_desk.csv).
    Repro,
}

fn after_help() -> String {
    format!("Configuration keys (set in --config or with --set KEY=VALUE):\n{}", key_help())
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Command::Calibrate { k: Some(k) } = command {
        cfg.set("calibrate.vocab", &k.to_string())?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<RunStatus, Error> {
    let cfg = resolve(&cli.common, &cli.command)?;
    let out: &Path = &cli.common.out;
    let mut log = |msg: &str| eprintln!("{msg}");
    match cli.command {
        Command::Calibrate { .. } => pipeline::calibrate(&cfg, out, &mut log),
        Command::Verify => pipeline::verify(&cfg, out, &mut log),
        Command::Pretrain => pipeline::pretrain(&cfg, out, &mut log),
        Command::Distill => pipeline::distill(&cfg, out, &mut log),
        Command::Sample => pipeline::sample(&cfg, out, &mut log),
        Command::Eval => pipeline::evaluate(&cfg, out, &mut log),
        Command::Repro => pipeline::repro(&cfg, out, &mut log),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } | Error::NonFiniteLoss { .. } | Error::Contract(_) | Error::InconsistentState(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(RunStatus::Ok) => ExitCode::SUCCESS,
        Ok(RunStatus::InvariantFailed(why)) => {
            eprintln!("invariant check failed: {why}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
