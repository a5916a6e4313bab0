//! Experiment harness: the six compared methods, dataset preparation, one
//! seeded run per method, run-directory artifacts and cross-seed summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{
    epochs_csv, run_ebpl, steps_csv, timing_csv, CurriculumConfig, CurriculumError, LabelMode,
    PlSchedule, RunState,
};
use crate::data::{
    gen_gaussian_blobs, gen_two_moons, load_csv, load_idx, make_semi_split, CsvSchema, DataError,
    LabeledPartition, LabeledSamples, SemiDataset,
};
use crate::diffcore::Activation;
use crate::ebm_train::{TrainConfig, TrainError};
use crate::hybrid_model::{HybridModel, ModelConfig, ModelError};
use crate::metrics::{
    ece, reliability_svg, report_csv, xml_escape, CalibrationReport, MetricsError,
    PredictionRecord, DEFAULT_BINS, SVG_HEIGHT, SVG_WIDTH,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run directory {dir}: {reason}")]
    IncompleteRun { dir: PathBuf, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

/// Compared methods, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BaselineWithout,
    BaselineHard,
    BaselineSoft,
    EbplWithout,
    EbplHard,
    EbplSoft,
}

/// Training family: classifier-only with re-initialization, or the joint model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Ebpl,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "ebpl" => Ok(Mode::Ebpl),
            other => Err(format!(
                "unknown mode `{other}` (expected baseline or ebpl)"
            )),
        }
    }
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::BaselineWithout,
        Method::BaselineHard,
        Method::BaselineSoft,
        Method::EbplWithout,
        Method::EbplHard,
        Method::EbplSoft,
    ];

    pub fn new(mode: Mode, labels: LabelMode) -> Self {
        match (mode, labels) {
            (Mode::Baseline, LabelMode::None) => Method::BaselineWithout,
            (Mode::Baseline, LabelMode::Hard) => Method::BaselineHard,
            (Mode::Baseline, LabelMode::Soft) => Method::BaselineSoft,
            (Mode::Ebpl, LabelMode::None) => Method::EbplWithout,
            (Mode::Ebpl, LabelMode::Hard) => Method::EbplHard,
            (Mode::Ebpl, LabelMode::Soft) => Method::EbplSoft,
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Method::BaselineWithout | Method::BaselineHard | Method::BaselineSoft => Mode::Baseline,
            _ => Mode::Ebpl,
        }
    }

    pub fn labels(self) -> LabelMode {
        match self {
            Method::BaselineWithout | Method::EbplWithout => LabelMode::None,
            Method::BaselineHard | Method::EbplHard => LabelMode::Hard,
            Method::BaselineSoft | Method::EbplSoft => LabelMode::Soft,
        }
    }

    /// File-system friendly name, e.g. `ebpl-soft`.
    pub fn slug(self) -> &'static str {
        match self {
            Method::BaselineWithout => "baseline-wo",
            Method::BaselineHard => "baseline-hard",
            Method::BaselineSoft => "baseline-soft",
            Method::EbplWithout => "ebpl-wo",
            Method::EbplHard => "ebpl-hard",
            Method::EbplSoft => "ebpl-soft",
        }
    }

    /// Table label, e.g. `EBPL w/o`.
    pub fn label(self) -> &'static str {
        match self {
            Method::BaselineWithout => "Baseline w/o",
            Method::BaselineHard => "Baseline Hard",
            Method::BaselineSoft => "Baseline Soft",
            Method::EbplWithout => "EBPL w/o",
            Method::EbplHard => "EBPL Hard",
            Method::EbplSoft => "EBPL Soft",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.slug() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        noise: f64,
        n_test: usize,
    },
    Blobs {
        means: Vec<Vec<f64>>,
        n_per_class: usize,
        cov_scale: f64,
        n_test_per_class: usize,
    },
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
        #[serde(default)]
        schema: CsvSchema,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        classes: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMoons {
            n: 1000,
            noise: 0.1,
            n_test: 1000,
        }
    }
}

impl DatasetSpec {
    pub fn describe(&self) -> String {
        match self {
            DatasetSpec::TwoMoons { n, noise, .. } => format!("two-moons(n={n}, noise={noise})"),
            DatasetSpec::Blobs {
                means, n_per_class, ..
            } => {
                format!("blobs(classes={}, n_per_class={n_per_class})", means.len())
            }
            DatasetSpec::Csv { train, .. } => format!("csv({})", train.display()),
            DatasetSpec::Idx { train_images, .. } => format!("idx({})", train_images.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub labels_per_class: usize,
    pub val_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            labels_per_class: 4,
            val_frac: 0.3,
        }
    }
}

/// Extractor shape; input width and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub diagonal_covariance: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSpec {
            hidden: d.hidden,
            feature_dim: d.feature_dim,
            activation: d.activation,
            diagonal_covariance: d.diagonal_covariance,
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            classes,
            activation: self.activation,
            diagonal_covariance: self.diagonal_covariance,
        }
    }
}

/// Everything needed to reproduce one run besides the seed and method.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub schedule: PlSchedule,
    pub bins: Option<usize>,
}

impl ExperimentConfig {
    pub fn bins(&self) -> usize {
        self.bins.unwrap_or(DEFAULT_BINS)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.train.validate()?;
        self.schedule.validate()?;
        if self.bins == Some(0) {
            return Err(ExperimentError::Config("bins must be at least 1".into()));
        }
        if self.split.labels_per_class == 0 {
            return Err(ExperimentError::Config(
                "split.labels_per_class must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.split.val_frac) || self.split.val_frac == 0.0 {
            return Err(ExperimentError::Config(
                "split.val_frac must lie in (0, 1)".into(),
            ));
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(ExperimentError::Config(
                "model widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Training and curriculum settings for `method`. Baselines drop the
    /// likelihood and tying terms and re-initialize after every assignment.
    pub fn method_configs(&self, method: Method) -> (TrainConfig, CurriculumConfig) {
        let mut train = self.train.clone();
        let reinit = method.mode() == Mode::Baseline;
        if reinit {
            train.nll_weight = 0.0;
            train.lambda = 0.0;
        }
        let curriculum = CurriculumConfig {
            schedule: self.schedule.clone(),
            labels: method.labels(),
            reinit_each_step: reinit,
        };
        (train, curriculum)
    }
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const DATA_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// Builds the semi-supervised dataset for `seed`.
pub fn prepare_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<SemiDataset, ExperimentError> {
    let mut rng = seeded(seed, DATA_STREAM);
    let (train, test): (LabeledSamples, Option<LabeledSamples>) = match &cfg.dataset {
        DatasetSpec::TwoMoons { n, noise, n_test } => {
            let train = gen_two_moons(*n, *noise, &mut rng)?;
            let test = if *n_test > 0 {
                Some(gen_two_moons(*n_test, *noise, &mut rng)?)
            } else {
                None
            };
            (train, test)
        }
        DatasetSpec::Blobs {
            means,
            n_per_class,
            cov_scale,
            n_test_per_class,
        } => {
            let c = means.len();
            let train = gen_gaussian_blobs(c, *n_per_class, means, *cov_scale, &mut rng)?;
            let test = if *n_test_per_class > 0 {
                Some(gen_gaussian_blobs(
                    c,
                    *n_test_per_class,
                    means,
                    *cov_scale,
                    &mut rng,
                )?)
            } else {
                None
            };
            (train, test)
        }
        DatasetSpec::Csv {
            train,
            test,
            schema,
        } => {
            let tr = load_csv(train, schema)?;
            let schema = CsvSchema {
                classes: Some(tr.classes),
                ..schema.clone()
            };
            let te = test.as_ref().map(|p| load_csv(p, &schema)).transpose()?;
            (tr, te)
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
        } => {
            let tr = load_idx(train_images, train_labels, *classes)?;
            let te = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l, Some(tr.classes))?),
                (None, None) => None,
                _ => {
                    return Err(ExperimentError::Config(
                        "test_images and test_labels must be given together".into(),
                    ))
                }
            };
            (tr, te)
        }
    };
    let semi = make_semi_split(
        &train,
        cfg.split.labels_per_class,
        cfg.split.val_frac,
        &mut rng,
    )?
    .with_provenance(&cfg.dataset.describe(), seed);
    Ok(match test {
        Some(t) => semi.with_test(&t)?,
        None => semi,
    })
}

/// Test-set evaluation of a model's classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub records: Vec<PredictionRecord>,
    pub report: CalibrationReport,
}

pub fn evaluate(
    model: &HybridModel,
    part: &LabeledPartition,
    bins: usize,
) -> Result<Evaluation, ExperimentError> {
    if part.is_empty() {
        return Err(ExperimentError::Config(
            "evaluation partition is empty".into(),
        ));
    }
    let post = model.classifier_posterior(&part.samples)?;
    let records: Vec<PredictionRecord> = (0..part.len())
        .map(|i| PredictionRecord::from_posterior(post.row(i), part.labels[i]))
        .collect();
    let report = ece(&records, bins)?;
    Ok(Evaluation { records, report })
}

pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub run: RunState,
    /// Best-validation checkpoint on the test partition (validation when
    /// the dataset has no test partition).
    pub eval: Evaluation,
}

/// One seeded run. Every method sees the same initial weights for a seed.
pub fn run_method(
    cfg: &ExperimentConfig,
    data: &SemiDataset,
    method: Method,
    seed: u64,
) -> Result<MethodRun, ExperimentError> {
    cfg.validate()?;
    let (train, curriculum) = cfg.method_configs(method);
    let mut rng = seeded(seed, TRAIN_STREAM);
    let model = HybridModel::init(&cfg.model.resolve(data.input_dim(), data.classes), &mut rng)?;
    let run = run_ebpl(model, data, &train, &curriculum, &mut rng)?;
    let part = if data.test.is_empty() {
        &data.validation
    } else {
        &data.test
    };
    let eval = evaluate(&run.best_model, part, cfg.bins())?;
    Ok(MethodRun {
        method,
        seed,
        run,
        eval,
    })
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub accuracy: f64,
    pub f_score: f64,
    pub ece: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub alpha: f64,
    pub n_selected: usize,
    pub pl_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub method: Method,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub train_resolved: TrainConfig,
    pub curriculum_resolved: CurriculumConfig,
    pub model_resolved: ModelConfig,
    pub dataset_digest: String,
    pub dataset_provenance: crate::data::Provenance,
    pub evaluated_on: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub metrics: TestMetrics,
    pub steps: Vec<StepSummary>,
    /// Files written next to the manifest.
    pub artifacts: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "ebpl-run/1";

pub const PREDICTIONS_CSV_HEADER: &str = "index,truth,predicted,confidence,correct";

fn predictions_csv(records: &[PredictionRecord]) -> String {
    let mut out = String::from(PREDICTIONS_CSV_HEADER);
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{}",
            r.truth,
            r.predicted,
            r.confidence,
            u8::from(r.is_correct())
        );
    }
    out
}

/// Writes every artifact of `run` into `dir` and returns the manifest.
pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    data: &SemiDataset,
    run: &MethodRun,
) -> Result<Manifest, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (train, curriculum) = cfg.method_configs(run.method);
    let rep = &run.eval.report;
    let title = format!("{} (seed {})", run.method.label(), run.seed);
    let mut files: Vec<(&str, String)> = vec![
        ("epochs.csv", epochs_csv(&run.run.epochs)),
        ("steps.csv", steps_csv(&run.run.steps)),
        ("timing.csv", timing_csv(&run.run.epochs)),
        ("calibration.csv", report_csv(rep)),
        ("predictions.csv", predictions_csv(&run.eval.records)),
        ("reliability.svg", reliability_svg(rep, &title)),
        (
            "best_model.json",
            run.run.best_model.to_checkpoint_string()?,
        ),
    ];
    files.sort_by_key(|(name, _)| *name);
    for (name, body) in &files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        method: run.method,
        seed: run.seed,
        config: cfg.clone(),
        train_resolved: train,
        curriculum_resolved: curriculum,
        model_resolved: run.run.best_model.config(),
        dataset_digest: data.digest()?,
        dataset_provenance: data.provenance.clone(),
        evaluated_on: if data.test.is_empty() {
            "validation"
        } else {
            "test"
        }
        .into(),
        best_epoch: run.run.best_epoch,
        best_val_accuracy: run.run.best_val_accuracy,
        metrics: TestMetrics {
            accuracy: rep.accuracy,
            f_score: rep.macro_f_score,
            ece: rep.ece,
        },
        steps: run
            .run
            .steps
            .iter()
            .map(|s| StepSummary {
                step: s.step,
                alpha: s.alpha,
                n_selected: s.n_selected,
                pl_accuracy: s.pl_accuracy,
            })
            .collect(),
        artifacts: files.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads a manifest and checks that every declared artifact exists and
/// that nothing undeclared sits next to it.
pub fn read_run(dir: &Path) -> Result<(Manifest, CalibrationReport), ExperimentError> {
    let incomplete = |reason: String| ExperimentError::IncompleteRun {
        dir: dir.to_path_buf(),
        reason,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| incomplete(format!("cannot read {MANIFEST_FILE}: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| incomplete(format!("bad {MANIFEST_FILE}: {e}")))?;
    for a in &manifest.artifacts {
        if !dir.join(a).is_file() {
            return Err(incomplete(format!("declared artifact {a} is missing")));
        }
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let name = entry
            .map_err(io_err(dir))?
            .file_name()
            .to_string_lossy()
            .into_owned();
        if name != MANIFEST_FILE && !manifest.artifacts.contains(&name) {
            return Err(incomplete(format!("undeclared file {name}")));
        }
    }
    let report = parse_calibration_csv(&dir.join("calibration.csv"))
        .map_err(|e| incomplete(format!("calibration.csv: {e}")))?;
    Ok((manifest, report))
}

/// Reads `predictions.csv` from a run directory.
pub fn read_predictions(dir: &Path) -> Result<Vec<PredictionRecord>, ExperimentError> {
    let path = dir.join("predictions.csv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |line: usize, what: &str| ExperimentError::IncompleteRun {
        dir: dir.to_path_buf(),
        reason: format!("predictions.csv line {line}: {what}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTIONS_CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(k + 2, "expected 5 fields"));
            }
            let truth = f[1].parse().map_err(|_| bad(k + 2, "bad truth"))?;
            let predicted = f[2].parse().map_err(|_| bad(k + 2, "bad prediction"))?;
            let confidence = f[3].parse().map_err(|_| bad(k + 2, "bad confidence"))?;
            Ok(PredictionRecord::new(predicted, truth, confidence))
        })
        .collect()
}

/// Reads the bin rows back from a calibration CSV.
fn parse_calibration_csv(path: &Path) -> Result<CalibrationReport, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut bins = Vec::new();
    let mut extra = std::collections::BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        if k == 0 {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some((key, v)) = rest.split_once(',') {
                extra.insert(
                    key.to_string(),
                    v.parse::<f64>().map_err(|e| e.to_string())?,
                );
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(format!("line {}: expected 8 fields", k + 1));
        }
        let opt = |s: &str| -> Result<Option<f64>, String> {
            if s == "null" {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|e: std::num::ParseFloatError| e.to_string())
            }
        };
        bins.push(crate::metrics::CalibrationBin {
            lower: f[1]
                .parse()
                .map_err(|e: std::num::ParseFloatError| e.to_string())?,
            upper: f[2]
                .parse()
                .map_err(|e: std::num::ParseFloatError| e.to_string())?,
            count: f[4]
                .parse()
                .map_err(|e: std::num::ParseIntError| e.to_string())?,
            accuracy: opt(f[5])?,
            confidence: opt(f[6])?,
        });
    }
    let get = |k: &str| {
        extra
            .get(k)
            .copied()
            .ok_or_else(|| format!("missing footer `{k}`"))
    };
    Ok(CalibrationReport {
        n: get("n")? as usize,
        ece: get("ece")?,
        accuracy: get("accuracy")?,
        macro_f_score: get("macro_f_score")?,
        bins,
    })
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub accuracy: (f64, f64),
    pub f_score: (f64, f64),
    pub ece: (f64, f64),
    /// Mean pseudo-label accuracy per step, over seeds that report it.
    pub pl_accuracy: Vec<(usize, f64)>,
}

pub fn summarize(manifests: &[Manifest]) -> Vec<MethodSummary> {
    let mut out = Vec::new();
    for method in Method::ALL {
        let runs: Vec<&Manifest> = manifests.iter().filter(|m| m.method == method).collect();
        if runs.is_empty() {
            continue;
        }
        let pick = |f: fn(&TestMetrics) -> f64| {
            mean_std(&runs.iter().map(|m| f(&m.metrics)).collect::<Vec<_>>())
        };
        let max_step = runs
            .iter()
            .flat_map(|m| m.steps.iter().map(|s| s.step))
            .max()
            .unwrap_or(0);
        let pl_accuracy = (1..=max_step)
            .filter_map(|t| {
                let v: Vec<f64> = runs
                    .iter()
                    .filter_map(|m| {
                        m.steps
                            .iter()
                            .find(|s| s.step == t)
                            .and_then(|s| s.pl_accuracy)
                    })
                    .collect();
                (!v.is_empty()).then(|| (t, mean_std(&v).0))
            })
            .collect();
        out.push(MethodSummary {
            method,
            seeds: runs.iter().map(|m| m.seed).collect(),
            accuracy: pick(|m| m.accuracy),
            f_score: pick(|m| m.f_score),
            ece: pick(|m| m.ece),
            pl_accuracy,
        });
    }
    out
}

pub const SUMMARY_CSV_HEADER: &str =
    "method,n_seeds,accuracy_mean,accuracy_std,f_score_mean,f_score_std,ece_mean,ece_std";

pub fn summary_csv(rows: &[MethodSummary]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method.slug(),
            r.seeds.len(),
            r.accuracy.0,
            r.accuracy.1,
            r.f_score.0,
            r.f_score.1,
            r.ece.0,
            r.ece.1
        );
    }
    out
}

/// Accuracy and F-score in percent, ECE as a fraction, `mean (std)`.
pub fn summary_table(rows: &[MethodSummary]) -> String {
    let mut out = String::from(
        "| Method | Seeds | Accuracy (%) | F-score (%) | ECE |\n|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} ({:.2}) | {:.2} ({:.2}) | {:.4} ({:.4}) |",
            r.method.label(),
            r.seeds.len(),
            100.0 * r.accuracy.0,
            100.0 * r.accuracy.1,
            100.0 * r.f_score.0,
            100.0 * r.f_score.1,
            r.ece.0,
            r.ece.1
        );
    }
    out
}

/// Line chart of mean pseudo-label accuracy per step, one line per method.
pub fn pl_accuracy_svg(rows: &[MethodSummary]) -> String {
    const COLORS: [&str; 6] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    ];
    let (w, h) = (SVG_WIDTH as f64, SVG_HEIGHT as f64);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let max_step = rows
        .iter()
        .flat_map(|r| r.pl_accuracy.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1);
    let xs = |t: usize| {
        if max_step == 1 {
            left + pw / 2.0
        } else {
            left + pw * (t - 1) as f64 / (max_step - 1) as f64
        }
    };
    let ys = |a: f64| top + ph * (1.0 - a);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">Pseudo-label accuracy per step</text>"#,
        left + pw / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=5 {
        let a = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{a:.1}</text>"#,
            left - 6.0,
            ys(a) + 4.0
        );
    }
    for t in 1..=max_step {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{t}</text>"#,
            xs(t),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13">step</text>"#,
        left + pw / 2.0,
        h - 18.0
    );
    for (k, r) in rows
        .iter()
        .filter(|r| !r.pl_accuracy.is_empty())
        .enumerate()
    {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = r
            .pl_accuracy
            .iter()
            .map(|&(t, a)| format!("{:.2},{:.2}", xs(t), ys(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for &(t, a) in &r.pl_accuracy {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                xs(t),
                ys(a)
            );
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            left + pw + 10.0,
            xml_escape(r.method.label())
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_order_and_names() {
        let slugs: Vec<&str> = Method::ALL.iter().map(|m| m.slug()).collect();
        assert_eq!(
            slugs,
            [
                "baseline-wo",
                "baseline-hard",
                "baseline-soft",
                "ebpl-wo",
                "ebpl-hard",
                "ebpl-soft"
            ]
        );
        for m in Method::ALL {
            assert_eq!(m.slug().parse::<Method>().unwrap(), m);
            assert_eq!(Method::new(m.mode(), m.labels()), m);
        }
    }

    #[test]
    fn baseline_configs_drop_ebm_terms() {
        let cfg = ExperimentConfig::default();
        let (train, cur) = cfg.method_configs(Method::BaselineHard);
        assert_eq!(train.nll_weight, 0.0);
        assert_eq!(train.lambda, 0.0);
        assert!(cur.reinit_each_step);
        assert_eq!(cur.labels, LabelMode::Hard);
        let (train, cur) = cfg.method_configs(Method::EbplSoft);
        assert_eq!(train, cfg.train);
        assert!(!cur.reinit_each_step);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }
}
