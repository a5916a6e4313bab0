//! `ebpl`: prepare datasets, train, evaluate and report pseudo-labeling runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use ebpl_core::curriculum::{LabelMode, EPOCHS_CSV_HEADER, STEPS_CSV_HEADER};
use ebpl_core::experiment::{ExperimentError, Mode, PREDICTIONS_CSV_HEADER, SUMMARY_CSV_HEADER};
use ebpl_core::metrics::CALIBRATION_CSV_HEADER;
use thiserror::Error;

use config::RunArgs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Model(#[from] ebpl_core::hybrid_model::ModelError),
    #[error(transparent)]
    Data(#[from] ebpl_core::data::DataError),
    #[error(transparent)]
    Metrics(#[from] ebpl_core::metrics::MetricsError),
}

impl From<ebpl_core::ebm_train::TrainError> for CliError {
    fn from(e: ebpl_core::ebm_train::TrainError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ebpl",
    version,
    about = "Energy-based pseudo-labeling experiments"
)]
struct Cli {
    /// TOML config file; command-line flags override its values
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output root [default: ebpl-out]
    #[arg(long, short, global = true, env = "EBPL_OUTPUT_ROOT")]
    output: Option<PathBuf>,
    /// More log output (-v info, -vv debug)
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the semi-supervised split for each seed and save a snapshot
    Prepare(RunArgs),
    /// Train one method for each seed
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// `ebpl` (joint model) or `baseline` (classifier only, re-initialized each step)
        #[arg(long)]
        mode: Option<Mode>,
        /// Pseudo-labels: `none`, `hard` or `soft` [default: soft for ebpl, hard for baseline]
        #[arg(long)]
        labels: Option<LabelMode>,
    },
    /// Re-evaluate saved checkpoints and check them against their manifests
    Evaluate {
        /// Run directories (or directories containing runs)
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Train all six methods for each seed, then write the report
    Ablate(RunArgs),
    /// Summarize completed runs into tables and diagrams
    Report {
        /// Run directories (or directories containing runs) [default: <output>/runs]
        runs: Vec<PathBuf>,
    },
}

fn schema_help() -> String {
    format!(
        "Output layout under the output root:
  data/seed-<s>.json                 dataset snapshot (prepare)
  runs/<method>/seed-<s>/            one run (train, ablate)
  report/                            summary.csv, summary.md, pl_accuracy.svg,
                                     reliability-<method>.svg (report, ablate)

Run directory files (all listed in manifest.json):
  epochs.csv       {EPOCHS_CSV_HEADER}
                   step 0 is initial training; one row per epoch
  steps.csv        {STEPS_CSV_HEADER}
  timing.csv       epoch,wall_ms
  predictions.csv  {PREDICTIONS_CSV_HEADER}
  calibration.csv  {CALIBRATION_CSV_HEADER}
                   empty bins hold `null`; footer lines `# n`, `# ece`,
                   `# accuracy`, `# macro_f_score`
  reliability.svg  640x480 reliability diagram
  best_model.json  best-validation checkpoint

Report files:
  summary.csv      {SUMMARY_CSV_HEADER}
                   std is the population standard deviation over seeds

Methods: baseline-wo, baseline-hard, baseline-soft, ebpl-wo, ebpl-hard, ebpl-soft

Environment:
  EBPL_OUTPUT_ROOT  output root, overridden by --output
  RUST_LOG          log filter, overrides -v"
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => config::FileConfig::load(path)?,
        None => config::FileConfig::default(),
    };
    match cli.command {
        Command::Prepare(args) => commands::prepare(&config::resolve(file, &args, cli.output)?),
        Command::Train { run, mode, labels } => {
            let settings = config::resolve(file, &run, cli.output)?;
            let mode = mode.or(settings.mode).unwrap_or(Mode::Ebpl);
            let labels = labels.or(settings.labels).unwrap_or(match mode {
                Mode::Ebpl => LabelMode::Soft,
                Mode::Baseline => LabelMode::Hard,
            });
            commands::train(&settings, ebpl_core::experiment::Method::new(mode, labels))
        }
        Command::Ablate(args) => commands::ablate(&config::resolve(file, &args, cli.output)?),
        Command::Evaluate { runs } => commands::evaluate(&runs),
        Command::Report { runs } => {
            let root = cli
                .output
                .or(file.output)
                .unwrap_or_else(|| config::DEFAULT_OUTPUT.into());
            let runs = if runs.is_empty() {
                vec![root.join("runs")]
            } else {
                runs
            };
            commands::report(&runs, &root.join("report"))
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(schema_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
