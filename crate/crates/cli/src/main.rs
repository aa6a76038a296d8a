mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rvg_core::{AblationVariant, Error};

#[derive(Parser, Debug)]
#[command(name = "rvg", version, about = "Latent-tree recursive visual grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override the config file, which
/// overrides built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model variant: full, chain, fix, scratch, nonode, nos or nof.
    #[arg(long)]
    pub variant: Option<AblationVariant>,
    /// Output directory.
    #[arg(long, default_value = "rvg-out")]
    pub out: PathBuf,
    /// Gumbel-Softmax temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Disable Gumbel noise during training.
    #[arg(long)]
    pub no_noise: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with expert trees and a vocabulary.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised pretraining of the merge policy from expert trees.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Weakly supervised fine-tuning with latent trees.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint (usually a pretrained one).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Include per-example predictions in the report.
        #[arg(long)]
        predictions: bool,
    },
    /// Train and evaluate several variants on one dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variants (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<AblationVariant>,
    },
    /// Finite-difference check of the full loss on random small models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        configs: u64,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Export grounded trees as DOT and a leaf-role frequency table.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Expression ids to draw (default: the first expression).
        #[arg(long, value_delimiter = ',')]
        expr: Vec<String>,
        /// Use at most this many expressions for the role table.
        #[arg(long)]
        limit: Option<usize>,
    },
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// A numerical check failed without any error being raised.
    Numeric(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config { .. }) => 1,
            CliError::Numeric(_) => 3,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RVG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("RVG_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Gen { common } => commands::gen(&common),
        Command::Pretrain { common, data, init } => commands::pretrain(&common, &data, init.as_deref()),
        Command::Finetune { common, data, init } => commands::finetune(&common, &data, init.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            predictions,
        } => commands::eval(&common, &checkpoint, &data, &split, predictions),
        Command::Ablate { common, data, variants } => commands::ablate(&common, &data, &variants),
        Command::Gradcheck {
            common,
            configs,
            dim,
            tol,
        } => commands::gradcheck(&common, configs, dim, tol),
        Command::Viz {
            common,
            checkpoint,
            data,
            split,
            expr,
            limit,
        } => commands::viz(&common, &checkpoint, &data, &split, &expr, limit),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
