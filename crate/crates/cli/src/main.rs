//! `stairiqa`: synthetic data generation, training, evaluation and
//! inspection for staircase quality models.

mod commands;
mod config;
mod outputs;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "stairiqa", version, about = "Blind image quality assessment with staircase feature fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic distorted-image databases with manifests.
    GenData {
        /// Generator spec (JSON). The built-in three-database spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the databases listed in a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Output directory; overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; overrides the config and STAIRIQA_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a manifest with five-crop inference and report SRCC/PLCC.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Head id, or `ensemble`. Every head plus the ensemble when omitted.
        #[arg(long)]
        head: Option<String>,
        /// Directory for the JSON and CSV reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the quality score of one image.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Head id, or `ensemble`. May be omitted for single-head models.
        #[arg(long)]
        head: Option<String>,
    },
    /// Finite-difference gradient checks over every op and a tiny model.
    GradCheck {
        #[arg(long, value_enum, default_value_t = SizeArg::Tiny)]
        size: SizeArg,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Leave-one-database-out evaluation over the config's databases.
    CrossEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Imdt,
    Single,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SizeArg {
    Tiny,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ConvWeightGrad,
}

/// Marks an error as a usage or configuration problem (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub trait UsageExt<T> {
    fn usage(self) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> anyhow::Result<T> {
        self.map_err(|e| UsageError(e.into()).into())
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config_error = matches!(err.downcast_ref::<stairiqa::Error>(), Some(stairiqa::Error::Config(_)));
    if err.downcast_ref::<UsageError>().is_some() || config_error {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, out } => commands::gen_data(spec.as_deref(), &out),
        Command::Train { config, mode, out, seed } => {
            let mode = mode.map(|m| match m {
                ModeArg::Imdt => stairiqa::experiment::TrainMode::Imdt,
                ModeArg::Single => stairiqa::experiment::TrainMode::Single,
            });
            commands::train(&config, &config::Overrides { out, seed, mode })
        }
        Command::Eval { checkpoint, manifest, head, out } => {
            commands::eval(&checkpoint, &manifest, head.as_deref(), out.as_deref())
        }
        Command::Score { checkpoint, image, head } => commands::score(&checkpoint, &image, head.as_deref()),
        Command::GradCheck { size, inject_fault } => {
            let fault = inject_fault.map(|f| match f {
                FaultArg::ConvWeightGrad => stairiqa::tape::Fault::ConvWeightGrad,
            });
            commands::grad_check(size == SizeArg::Full, fault)
        }
        Command::CrossEval { config, out, seed } => {
            commands::cross_eval(&config, &config::Overrides { out, seed, mode: None })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
