//! Config file loading and flag overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use ebpl_core::curriculum::{LabelMode, PlSchedule};
use ebpl_core::data::CsvSchema;
use ebpl_core::ebm_train::TrainConfig;
use ebpl_core::experiment::{DatasetSpec, ExperimentConfig, Mode, ModelSpec, SplitSpec};
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_OUTPUT: &str = "ebpl-out";

/// TOML config file. Every key is optional; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seeds: Option<Vec<u64>>,
    pub output: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub labels: Option<LabelMode>,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub schedule: PlSchedule,
    pub bins: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Flags shared by the commands that train or prepare data.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Comma-separated seeds, e.g. `1,2,3` [default: 1]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Labeled samples per class
    #[arg(long)]
    pub labels_per_class: Option<usize>,
    /// Fraction of the training data held out for validation
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the tying penalty
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the EBM likelihood term
    #[arg(long)]
    pub nll_weight: Option<f64>,
    /// Mini-batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Number of pseudo-label steps T; rates become 100 t / T
    #[arg(long)]
    pub steps: Option<usize>,
    /// Epochs of initial training
    #[arg(long)]
    pub initial_epochs: Option<usize>,
    /// Epochs per pseudo-label step
    #[arg(long)]
    pub step_epochs: Option<usize>,
    /// SGLD step size
    #[arg(long)]
    pub sgld_step: Option<f64>,
    /// SGLD noise variance
    #[arg(long)]
    pub sgld_noise: Option<f64>,
    /// SGLD steps per sampling call
    #[arg(long)]
    pub sgld_steps: Option<usize>,
    /// Calibration bins
    #[arg(long)]
    pub bins: Option<usize>,
    /// Read samples from a CSV file instead of the configured dataset
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Optional test CSV to go with `--csv`
    #[arg(long, requires = "csv")]
    pub csv_test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub mode: Option<Mode>,
    pub labels: Option<LabelMode>,
}

/// Merges the file with flags; flags win. `output` is the flag or
/// environment value, which also wins over the file.
pub fn resolve(
    file: FileConfig,
    args: &RunArgs,
    output: Option<PathBuf>,
) -> Result<Settings, CliError> {
    let mut exp = ExperimentConfig {
        dataset: file.dataset,
        split: file.split,
        model: file.model,
        train: file.train,
        schedule: file.schedule,
        bins: file.bins,
    };
    if let Some(v) = args.labels_per_class {
        exp.split.labels_per_class = v;
    }
    if let Some(v) = args.val_frac {
        exp.split.val_frac = v;
    }
    if let Some(v) = args.lr {
        exp.train.optimizer.learning_rate = v;
    }
    if let Some(v) = args.lambda {
        exp.train.lambda = v;
    }
    if let Some(v) = args.nll_weight {
        exp.train.nll_weight = v;
    }
    if let Some(v) = args.batch_size {
        exp.train.batch_size = v;
    }
    if let Some(t) = args.steps {
        if t == 0 {
            return Err(CliError::Config("--steps must be at least 1".into()));
        }
        exp.schedule.rates = PlSchedule::linear(t, 0, 0).rates;
    }
    if let Some(v) = args.initial_epochs {
        exp.schedule.initial_epochs = v;
    }
    if let Some(v) = args.step_epochs {
        exp.schedule.step_epochs = v;
    }
    if let Some(v) = args.sgld_step {
        exp.train.sgld.step_size = v;
    }
    if let Some(v) = args.sgld_noise {
        exp.train.sgld.noise_variance = v;
    }
    if let Some(v) = args.sgld_steps {
        exp.train.sgld.n_steps = v;
    }
    if args.bins.is_some() {
        exp.bins = args.bins;
    }
    if let Some(train) = &args.csv {
        exp.dataset = DatasetSpec::Csv {
            train: train.clone(),
            test: args.csv_test.clone(),
            schema: CsvSchema::default(),
        };
    }
    exp.validate()?;

    let seeds = args.seeds.clone().or(file.seeds).unwrap_or_else(|| vec![1]);
    if seeds.is_empty() {
        return Err(CliError::Config(
            "seeds: at least one seed is required".into(),
        ));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(CliError::Config(format!("seeds: duplicates in {seeds:?}")));
    }
    Ok(Settings {
        experiment: exp,
        seeds,
        output: output
            .or(file.output)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
        mode: file.mode,
        labels: file.labels,
    })
}
