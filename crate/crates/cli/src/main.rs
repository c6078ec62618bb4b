//! `decouple`: synthetic data, curation, training, evaluation and the
//! ablation matrix from the command line.
//!
//! Exit codes: 0 ok, 1 other failure, 2 usage or configuration error,
//! 3 empty selection, 4 missing dependency artifact, 5 purity violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use decouple_core::losses::Phase;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("i/o error at {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] decouple_core::Error),

    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use decouple_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::EmptySelection(_)) => 3,
            CliError::Core(E::MissingArtifact(_) | E::ManifestMissing(_)) => 4,
            CliError::Core(E::PurityViolation(_)) => 5,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "decouple", version, about = "Class-specific object removal with task-decoupled training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CurateMode {
    Restorer,
    Remover,
    Bank,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    Restorer,
    Remover,
    Baseline,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Restorer => Phase::Restorer,
            PhaseArg::Remover => Phase::Remover,
            PhaseArg::Baseline => Phase::Baseline,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene dataset with a manifest.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Select restorer or remover images, or build a class-shaped mask bank.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        /// Target class, by name or id.
        #[arg(long)]
        class: String,
        #[arg(long, value_enum)]
        mode: CurateMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a restorer, a guided remover or the conventional baseline.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        restorer_ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Compute FID*, U-IDS* and paired full-reference metrics for a checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long)]
        comparison_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the ablation matrix and print the delta table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynth { config, out, n, seed } => commands::gen_synth(config.as_deref(), &out, n, seed),
        Command::Curate {
            manifest,
            class,
            mode,
            out,
            config,
        } => commands::curate(&manifest, &class, mode, &out, config.as_deref()),
        Command::Train {
            phase,
            config,
            restorer_ckpt,
            manifest,
            bank,
            out,
            seed,
            max_steps,
        } => commands::train(commands::TrainArgs {
            phase: phase.into(),
            config,
            restorer_ckpt,
            manifest,
            bank,
            out,
            seed,
            max_steps,
        }),
        Command::Evaluate {
            ckpt,
            test_manifest,
            comparison_manifest,
            out,
            config,
        } => commands::evaluate(&ckpt, test_manifest, comparison_manifest, &out, config.as_deref()),
        Command::Ablate { config, out, seed } => commands::ablate(config.as_deref(), &out, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
