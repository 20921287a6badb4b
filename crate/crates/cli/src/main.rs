mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nst_core::data::MissingPolicy;
use nst_core::model::Variant;
use nst_core::NstError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(NstError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NstError> for CliError {
    fn from(e: NstError) -> Self {
        match e {
            NstError::Config(m) => CliError::Config(m),
            other => CliError::Run(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "nst",
    version,
    about = "Non-stationary Transformer forecasting toolkit"
)]
struct Cli {
    /// Log progress to stderr (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Run configuration file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Missing {
    Strict,
    ForwardFill,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, history and resolved config.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate (default: <output_dir>/checkpoint.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check the attention recovery identity on random linear instances.
    Verify {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = nst_core::oracle::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Write per-instance results as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-variable and mean ADF statistics of a CSV file.
    Stationarity {
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = Missing::Strict)]
        missing: Missing,
    },
    /// Train and test every attention mode under one configuration.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of modes (default: all five).
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Variant>>,
    },
    /// Write a synthetic dataset as CSV.
    GenSynth {
        /// Destination CSV file.
        #[arg(short, long)]
        out: PathBuf,
        /// Generator settings (TOML, flat keys).
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override a generator setting, e.g. `--set kind=random_walk`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Train(a) => commands::cmd_train(&a.config, &a.overrides, a.force).map(|_| true),
        Command::Eval { run, checkpoint } => {
            commands::cmd_eval(&run.config, &run.overrides, checkpoint, run.force).map(|_| true)
        }
        Command::Verify {
            instances,
            seed,
            tolerance,
            out,
        } => commands::cmd_verify(instances, seed, tolerance, out),
        Command::Stationarity { csv, missing } => {
            let policy = match missing {
                Missing::Strict => MissingPolicy::Strict,
                Missing::ForwardFill => MissingPolicy::ForwardFill,
            };
            commands::cmd_stationarity(&csv, policy).map(|_| true)
        }
        Command::Ablate { run, modes } => {
            commands::cmd_ablate(&run.config, &run.overrides, modes, run.force).map(|_| true)
        }
        Command::GenSynth {
            out,
            config,
            overrides,
            force,
        } => commands::cmd_gen_synth(&out, config.as_deref(), &overrides, force).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
