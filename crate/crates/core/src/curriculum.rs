//! Curriculum pseudo-labeling.
//!
//! Initial training uses the labeled samples for cross-entropy and every
//! sample for the likelihood term. Each later step discards the previous
//! pseudo-labels, ranks the unlabeled pool by classifier confidence, labels
//! the top `α_t` percent and trains for a few more epochs. The model with the
//! best validation accuracy over all epochs is kept.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SemiDataset, UnlabeledPool};
use crate::diffcore::Tensor;
use crate::ebm_train::{
    train_epoch, EpochDiagnostics, TrainConfig, TrainError, TrainerState, TrainingSet,
};
use crate::hybrid_model::{HybridModel, ModelError};
use crate::metrics::argmax;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("unlabeled pool is empty")]
    EmptyPool,
    #[error("pseudo-label set is empty")]
    EmptySelection,
    #[error("rate {0} outside (0, 100]")]
    Rate(f64),
    #[error("pool index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How selected samples are labeled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// No pseudo-label steps; initial training only.
    None,
    Hard,
    #[default]
    Soft,
}

impl FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "w/o" => Ok(LabelMode::None),
            "hard" => Ok(LabelMode::Hard),
            "soft" => Ok(LabelMode::Soft),
            other => Err(format!(
                "unknown label mode `{other}` (expected none, hard or soft)"
            )),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::None => "none",
            LabelMode::Hard => "hard",
            LabelMode::Soft => "soft",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlSchedule {
    /// Percent of the pool labeled at steps `1..=T`.
    pub rates: Vec<f64>,
    pub initial_epochs: usize,
    pub step_epochs: usize,
}

impl Default for PlSchedule {
    fn default() -> Self {
        PlSchedule::linear(4, 120, 20)
    }
}

impl PlSchedule {
    /// `α_t = 100 t / T`.
    pub fn linear(steps: usize, initial_epochs: usize, step_epochs: usize) -> Self {
        PlSchedule {
            rates: (1..=steps)
                .map(|t| 100.0 * t as f64 / steps as f64)
                .collect(),
            initial_epochs,
            step_epochs,
        }
    }

    pub fn steps(&self) -> usize {
        self.rates.len()
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        if self.rates.is_empty() {
            return Err(CurriculumError::Schedule(
                "at least one step is required".into(),
            ));
        }
        if let Some(&r) = self.rates.iter().find(|&&r| !(r > 0.0 && r <= 100.0)) {
            return Err(CurriculumError::Rate(r));
        }
        if self.rates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CurriculumError::Schedule(format!(
                "rates must be strictly increasing: {:?}",
                self.rates
            )));
        }
        if *self.rates.last().expect("non-empty") != 100.0 {
            return Err(CurriculumError::Schedule(
                "the last rate must be 100".into(),
            ));
        }
        Ok(())
    }
}

/// Pseudo-labels active during one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    /// Indices into the unlabeled pool, in ranking order.
    pub indices: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
    pub confidences: Vec<f64>,
    pub step: usize,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `ceil(α/100 · n)`, at least 1 and at most `n`.
pub fn selection_count(n: usize, alpha: f64) -> usize {
    // The small slack keeps e.g. 100·0.07 = 7.000000000000001 from rounding up.
    let k = (alpha / 100.0 * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Indices of the top `α` percent by confidence, highest first; equal
/// confidences are ordered by ascending index.
pub fn select_top(confidences: &[f64], alpha: f64) -> Result<Vec<usize>, CurriculumError> {
    if confidences.is_empty() {
        return Err(CurriculumError::EmptyPool);
    }
    if !(alpha > 0.0 && alpha <= 100.0) {
        return Err(CurriculumError::Rate(alpha));
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    order.truncate(selection_count(confidences.len(), alpha));
    Ok(order)
}

/// Ranks the pool by the classifier's confidence and labels the top `α`.
pub fn rank_and_select(
    model: &HybridModel,
    pool: &UnlabeledPool,
    alpha: f64,
    mode: LabelMode,
    step: usize,
) -> Result<PseudoLabelSet, CurriculumError> {
    if pool.is_empty() {
        return Err(CurriculumError::EmptyPool);
    }
    if mode == LabelMode::None {
        return Err(CurriculumError::Config(
            "rank_and_select needs hard or soft labels".into(),
        ));
    }
    let post = model.classifier_posterior(&pool.samples)?;
    let c = model.classes();
    let conf: Vec<f64> = (0..pool.len()).map(|i| argmax(post.row(i)).1).collect();
    let indices = select_top(&conf, alpha)?;
    let targets = indices
        .iter()
        .map(|&i| {
            let row = post.row(i);
            match mode {
                LabelMode::Hard => {
                    let mut one_hot = vec![0.0; c];
                    one_hot[argmax(row).0] = 1.0;
                    one_hot
                }
                _ => row.to_vec(),
            }
        })
        .collect::<Vec<_>>();
    let confidences = targets.iter().map(|t| argmax(t).1).collect();
    Ok(PseudoLabelSet {
        indices,
        targets,
        confidences,
        step,
    })
}

/// Fraction of pseudo-labels whose argmax matches `truth[index]`.
pub fn pl_accuracy(pl: &PseudoLabelSet, truth: &[usize]) -> Result<f64, CurriculumError> {
    if pl.is_empty() {
        return Err(CurriculumError::EmptySelection);
    }
    let mut correct = 0usize;
    for (&i, t) in pl.indices.iter().zip(&pl.targets) {
        let label = *truth.get(i).ok_or(CurriculumError::IndexOutOfRange {
            index: i,
            len: truth.len(),
        })?;
        if argmax(t).0 == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / pl.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub schedule: PlSchedule,
    pub labels: LabelMode,
    /// Re-initialize weights and optimizer state after each assignment.
    pub reinit_each_step: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            schedule: PlSchedule::default(),
            labels: LabelMode::Soft,
            reinit_each_step: false,
        }
    }
}

/// One row of the per-epoch log. `step` is 0 during initial training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub n_targeted: usize,
    pub diagnostics: EpochDiagnostics,
    pub val_accuracy: f64,
    pub best_val_accuracy: f64,
}

/// One row of the per-step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub alpha: f64,
    pub n_selected: usize,
    pub pl_accuracy: Option<f64>,
    pub mean_confidence: f64,
    pub val_accuracy: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug)]
pub struct RunState {
    pub model: HybridModel,
    pub best_model: HybridModel,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub step: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Selections in step order.
    pub pseudo_labels: Vec<PseudoLabelSet>,
}

pub fn validation_accuracy(
    model: &HybridModel,
    data: &SemiDataset,
) -> Result<f64, CurriculumError> {
    let val = &data.validation;
    if val.is_empty() {
        return Err(CurriculumError::Config("validation set is empty".into()));
    }
    let post = model.classifier_posterior(&val.samples)?;
    let correct = (0..val.len())
        .filter(|&i| argmax(post.row(i)).0 == val.labels[i])
        .count();
    Ok(correct as f64 / val.len() as f64)
}

fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Labeled rows first, then the pool; pool samples carry their pseudo-label
/// when selected. Without the likelihood term untargeted rows are dropped.
fn training_set(
    data: &SemiDataset,
    pl: Option<&PseudoLabelSet>,
    keep_untargeted: bool,
) -> TrainingSet {
    let c = data.classes;
    let mut pool_targets: Vec<Option<Vec<f64>>> = vec![None; data.unlabeled.len()];
    if let Some(pl) = pl {
        for (&i, t) in pl.indices.iter().zip(&pl.targets) {
            pool_targets[i] = Some(t.clone());
        }
    }
    let mut targets: Vec<Option<Vec<f64>>> = data
        .labeled
        .labels
        .iter()
        .map(|&l| Some(one_hot(l, c)))
        .collect();
    let mut rows: Vec<usize> = Vec::new();
    for (i, t) in pool_targets.into_iter().enumerate() {
        if keep_untargeted || t.is_some() {
            rows.push(i);
            targets.push(t);
        }
    }
    let d = data.input_dim();
    let mut samples = data.labeled.samples.data().to_vec();
    for &i in &rows {
        samples.extend_from_slice(data.unlabeled.samples.row(i));
    }
    TrainingSet {
        samples: Tensor::new(vec![targets.len(), d], samples).expect("consistent row width"),
        targets,
    }
}

struct Tracker<'a> {
    data: &'a SemiDataset,
    best_model: HybridModel,
    best_val: f64,
    best_epoch: usize,
    epochs: Vec<EpochRecord>,
}

impl Tracker<'_> {
    fn observe(
        &mut self,
        model: &HybridModel,
        step: usize,
        n_targeted: usize,
        diagnostics: EpochDiagnostics,
    ) -> Result<f64, CurriculumError> {
        let acc = validation_accuracy(model, self.data)?;
        let epoch = self.epochs.len() + 1;
        // Strict improvement only: ties keep the earlier checkpoint.
        if acc > self.best_val {
            self.best_val = acc;
            self.best_model = model.clone();
            self.best_epoch = epoch;
        }
        self.epochs.push(EpochRecord {
            epoch,
            step,
            n_targeted,
            diagnostics,
            val_accuracy: acc,
            best_val_accuracy: self.best_val,
        });
        Ok(acc)
    }
}

/// Runs initial training followed by the pseudo-label steps.
///
/// `model` is the freshly initialized starting point. With
/// `reinit_each_step` the weights are redrawn from `model`'s configuration
/// after each assignment (labels always come from the current model).
pub fn run_ebpl<R: Rng + ?Sized>(
    model: HybridModel,
    data: &SemiDataset,
    train: &TrainConfig,
    cfg: &CurriculumConfig,
    rng: &mut R,
) -> Result<RunState, CurriculumError> {
    train.validate()?;
    cfg.schedule.validate()?;
    if data.labeled.is_empty() {
        return Err(CurriculumError::Config("no labeled samples".into()));
    }
    if data.input_dim() != model.input_dim() || data.classes != model.classes() {
        return Err(CurriculumError::Config(format!(
            "model expects {} inputs and {} classes, dataset has {} and {}",
            model.input_dim(),
            model.classes(),
            data.input_dim(),
            data.classes
        )));
    }
    let keep_untargeted = train.nll_weight > 0.0;
    let mut model = model;
    let mut state = TrainerState::new(train, model.input_dim());
    let initial_val = validation_accuracy(&model, data)?;
    let mut tracker = Tracker {
        data,
        best_model: model.clone(),
        best_val: initial_val,
        best_epoch: 0,
        epochs: Vec::new(),
    };

    let set = training_set(data, None, keep_untargeted);
    for _ in 0..cfg.schedule.initial_epochs {
        let diag = train_epoch(&mut model, &set, train, &mut state, rng)?;
        tracker.observe(&model, 0, set.n_targeted(), diag)?;
    }

    let mut steps = Vec::new();
    let mut pseudo_labels = Vec::new();
    let mut step = 0;
    if cfg.labels != LabelMode::None && !data.unlabeled.is_empty() {
        let model_cfg = model.config();
        for (t, &alpha) in cfg.schedule.rates.iter().enumerate() {
            step = t + 1;
            let pl = rank_and_select(&model, &data.unlabeled, alpha, cfg.labels, step)?;
            let pl_acc = data.unlabeled_truth().score(&pl).ok();
            if cfg.reinit_each_step {
                model = HybridModel::init(&model_cfg, rng)?;
                state = TrainerState::new(train, model.input_dim());
            }
            let set = training_set(data, Some(&pl), keep_untargeted);
            let mut val = validation_accuracy(&model, data)?;
            for _ in 0..cfg.schedule.step_epochs {
                let diag = train_epoch(&mut model, &set, train, &mut state, rng)?;
                val = tracker.observe(&model, step, set.n_targeted(), diag)?;
            }
            let mean_confidence = pl.confidences.iter().sum::<f64>() / pl.len() as f64;
            steps.push(StepRecord {
                step,
                alpha,
                n_selected: pl.len(),
                pl_accuracy: pl_acc,
                mean_confidence,
                val_accuracy: val,
                best_so_far: tracker.best_val,
            });
            pseudo_labels.push(pl);
        }
    }

    Ok(RunState {
        model,
        best_model: tracker.best_model,
        best_val_accuracy: tracker.best_val,
        best_epoch: tracker.best_epoch,
        step,
        epochs: tracker.epochs,
        steps,
        pseudo_labels,
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.10}")
}

pub const EPOCHS_CSV_HEADER: &str =
    "epoch,step,n_targeted,batches,ce,nll,tie,total,diverged_chains,skipped_steps,val_accuracy,best_val_accuracy";

pub const STEPS_CSV_HEADER: &str =
    "step,alpha,n_selected,pl_accuracy,mean_confidence,val_accuracy,best_so_far";

/// Per-epoch log. Timing is excluded so reruns are byte-identical.
pub fn epochs_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCHS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let d = &r.diagnostics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.n_targeted,
            d.batches,
            fmt_f(d.ce),
            fmt_f(d.nll),
            fmt_f(d.tie),
            fmt_f(d.total),
            d.diverged_chains,
            d.skipped_steps,
            fmt_f(r.val_accuracy),
            fmt_f(r.best_val_accuracy)
        );
    }
    out
}

pub fn steps_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(STEPS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            fmt_f(r.alpha),
            r.n_selected,
            r.pl_accuracy.map(fmt_f).unwrap_or_default(),
            fmt_f(r.mean_confidence),
            fmt_f(r.val_accuracy),
            fmt_f(r.best_so_far)
        );
    }
    out
}

pub fn timing_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,wall_ms\n");
    for r in records {
        let _ = writeln!(out, "{},{}", r.epoch, r.diagnostics.wall_ms);
    }
    out
}
