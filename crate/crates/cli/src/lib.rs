//! Command-line front end: config handling, run manifests and the
//! pipeline commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{AblationKind, Ctx, Outcome, Phase};
use config::ExperimentConfig;
use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "dualproc", version, about = "Dual-process manipulation policy pipeline")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Rerun even when the manifest says outputs are current.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for rollouts and data generation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Replace the config's top-level seed.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Lsys2Pretrain,
    Lsys2Finetune,
    Ssys1,
    /// The zero-latent baseline policy.
    Ssys1Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Taps,
    PtFt,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the expert dataset and the seen/unseen split.
    GenData,
    /// Train one model.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
    },
    /// Success rates for the configured runners.
    Eval,
    /// Per-step timing; exits 4 when the speed ordering does not hold.
    Bench,
    /// Latent-tap or pretrained-vs-finetuned ablation.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationArg,
    },
    /// Check a dataset, checkpoint or latent file.
    Verify { path: PathBuf },
    /// Re-derive the pipeline and byte-compare its outputs.
    Repro,
    /// gen-data, every train phase and eval in sequence.
    Pipeline,
}

fn context(cli: &Cli) -> Result<Ctx> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed_override {
        cfg.seed = s;
    }
    let out = cfg.effective_output_dir();
    cfg.output_dir = out.clone();
    Ok(Ctx {
        cfg,
        out,
        force: cli.force,
    })
}

fn report(o: Outcome) {
    if o == Outcome::UpToDate {
        println!("up to date");
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be >= 1".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Verify { path } => {
            let r = commands::verify(path)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            return Ok(());
        }
        Command::GenData => report(commands::gen_data(&context(&cli)?)?),
        Command::Train { phase } => {
            let phase = match phase {
                PhaseArg::Lsys2Pretrain => Phase::Lsys2Pretrain,
                PhaseArg::Lsys2Finetune => Phase::Lsys2Finetune,
                PhaseArg::Ssys1 => Phase::Ssys1,
                PhaseArg::Ssys1Zero => Phase::Ssys1Zero,
            };
            report(commands::train_phase(&context(&cli)?, phase)?)
        }
        Command::Eval => report(commands::eval(&context(&cli)?)?),
        Command::Bench => report(commands::bench(&context(&cli)?)?),
        Command::Ablate { kind } => {
            let kind = match kind {
                AblationArg::Taps => AblationKind::Taps,
                AblationArg::PtFt => AblationKind::PtFt,
            };
            report(commands::ablate(&context(&cli)?, kind)?)
        }
        Command::Repro => {
            let r = commands::repro(&context(&cli)?)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Pipeline => commands::pipeline(&context(&cli)?)?,
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
