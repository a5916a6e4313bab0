//! Joint training of the classifier and the energy-based model.
//!
//! The minimized objective per mini-batch is
//!
//! ```text
//! L = CE(soft targets) + w_nll · [mean E_total(data) − mean E_total(negatives)] + λ · tie
//! ```
//!
//! where the bracket is the contrastive surrogate whose parameter gradient
//! equals the sampled gradient of the negative log-likelihood. Negatives come
//! from SGLD chains persisted in a [`ReplayBuffer`].

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Gradients, Tape, Tensor, Var};
use crate::hybrid_model::{BoundModel, HybridModel, ModelError, ParamKey};

/// Gradient per trainable parameter.
pub type GradientMap = BTreeMap<ParamKey, Tensor>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("target row {row} sums to {sum} (expected 1 within 1e-6)")]
    TargetNotNormalized { row: usize, sum: f64 },
    #[error("training set has no labeled samples")]
    NoLabeledSamples,
    #[error("all {chains} SGLD chains diverged during the epoch")]
    AllChainsDiverged { chains: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldConfig {
    pub n_steps: usize,
    /// `α` in `x ← x − α/2 · ∂E/∂x + ε`.
    pub step_size: f64,
    /// Variance of `ε`.
    pub noise_variance: f64,
    pub init_low: f64,
    pub init_high: f64,
    pub reinit_prob: f64,
    /// Per-element clip on `∂E_total/∂x`; `None` disables clipping. Config
    /// files without a null can write `false`.
    #[serde(deserialize_with = "clip_or_off")]
    pub grad_clip: Option<f64>,
    /// Clamp chain states to `[init_low, init_high]` after every step.
    pub clamp_to_init_range: bool,
}

fn clip_or_off<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Clip {
        Value(f64),
        Flag(bool),
        Null(()),
    }
    match Clip::deserialize(d)? {
        Clip::Value(v) => Ok(Some(v)),
        Clip::Flag(false) | Clip::Null(()) => Ok(None),
        Clip::Flag(true) => Err(serde::de::Error::custom(
            "grad_clip: expected a number or false",
        )),
    }
}

impl Default for SgldConfig {
    fn default() -> Self {
        SgldConfig {
            n_steps: 20,
            step_size: 1.0,
            noise_variance: 1.0,
            init_low: -1.0,
            init_high: 1.0,
            reinit_prob: 0.05,
            grad_clip: Some(0.01),
            clamp_to_init_range: true,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.n_steps < 1 {
            return bad("sgld.n_steps must be at least 1".into());
        }
        if !(self.step_size > 0.0) {
            return bad(format!(
                "sgld.step_size must be positive (got {})",
                self.step_size
            ));
        }
        if !(self.noise_variance >= 0.0) {
            return bad(format!(
                "sgld.noise_variance must be non-negative (got {})",
                self.noise_variance
            ));
        }
        if !(self.init_low < self.init_high) {
            return bad(format!(
                "sgld.init_low ({}) must be below sgld.init_high ({})",
                self.init_low, self.init_high
            ));
        }
        if !(0.0..=1.0).contains(&self.reinit_prob) {
            return bad(format!(
                "sgld.reinit_prob must lie in [0, 1] (got {})",
                self.reinit_prob
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("sgld.grad_clip must be positive (got {c})"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "optimizer requires learning_rate > 0, betas in [0, 1), epsilon > 0 (got {self:?})"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Weight of the tying penalty.
    pub lambda: f64,
    /// Weight of the EBM likelihood term; 0 disables SGLD entirely.
    pub nll_weight: f64,
    pub buffer_capacity: usize,
    pub sgld: SgldConfig,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lambda: 0.001,
            nll_weight: 1.0,
            buffer_capacity: 1000,
            sgld: SgldConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.nll_weight >= 0.0) {
            return Err(TrainError::Config(
                "lambda and nll_weight must be non-negative".into(),
            ));
        }
        if self.buffer_capacity < 1 {
            return Err(TrainError::Config(
                "buffer_capacity must be at least 1".into(),
            ));
        }
        self.sgld.validate()?;
        self.optimizer.validate()
    }
}

// ---------------------------------------------------------------------------
// Replay buffer and SGLD
// ---------------------------------------------------------------------------

/// Persistent SGLD chain states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    input_dim: usize,
    samples: Vec<Vec<f64>>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, input_dim: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            input_dim,
            samples: Vec::new(),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    fn write(&mut self, slot: Option<usize>, x: &[f64]) {
        debug_assert_eq!(x.len(), self.input_dim);
        match slot {
            Some(i) => self.samples[i].copy_from_slice(x),
            None if self.samples.len() < self.capacity => self.samples.push(x.to_vec()),
            None => {
                self.samples[self.cursor].copy_from_slice(x);
                self.cursor = (self.cursor + 1) % self.capacity;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgldOutput {
    pub samples: Tensor,
    /// Chains started from `p₀` instead of the buffer.
    pub fresh_chains: usize,
    /// Chains that hit a non-finite energy or gradient at least once.
    pub diverged_chains: usize,
    /// Total non-finite events (a chain may diverge more than once).
    pub divergence_events: usize,
}

fn uniform_row<R: Rng + ?Sized>(cfg: &SgldConfig, dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.random_range(cfg.init_low..cfg.init_high))
        .collect()
}

/// Per-row `E_total` and `∂E_total/∂x` for a batch, parameters held fixed.
pub fn energy_and_input_grad(
    model: &HybridModel,
    x: &Tensor,
) -> Result<(Vec<f64>, Tensor), TrainError> {
    let mut tape = Tape::new();
    let mut bound = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone().with_grad(true));
    let f = model.features_on(&mut tape, &bound, xv)?;
    let e = model.energies_on(&mut tape, &mut bound, f)?;
    let et = model.total_energy_on(&mut tape, e)?;
    let s = tape.sum(et);
    let energies = tape.value(et).data().to_vec();
    let mut grads = tape.backward_from(s, &Tensor::scalar(1.0))?;
    Ok((energies, grads.take(xv).expect("input requires grad")))
}

/// Draws `batch` negatives with `cfg.n_steps` Langevin updates per chain.
pub fn sgld_sample<R: Rng + ?Sized>(
    model: &HybridModel,
    cfg: &SgldConfig,
    buffer: &mut ReplayBuffer,
    batch: usize,
    rng: &mut R,
) -> Result<SgldOutput, TrainError> {
    if batch == 0 {
        return Err(TrainError::EmptyBatch("SGLD"));
    }
    cfg.validate()?;
    let dim = model.input_dim();
    let mut slots = Vec::with_capacity(batch);
    let mut data = Vec::with_capacity(batch * dim);
    let mut fresh = 0;
    for _ in 0..batch {
        if buffer.is_empty() || rng.random::<f64>() < cfg.reinit_prob {
            data.extend(uniform_row(cfg, dim, rng));
            slots.push(None);
            fresh += 1;
        } else {
            let i = rng.random_range(0..buffer.len());
            data.extend_from_slice(&buffer.samples[i]);
            slots.push(Some(i));
        }
    }
    let mut x = Tensor::new(vec![batch, dim], data)?;

    let noise = if cfg.noise_variance > 0.0 {
        Some(Normal::new(0.0, cfg.noise_variance.sqrt()).expect("finite std"))
    } else {
        None
    };
    let half_step = 0.5 * cfg.step_size;
    let mut diverged = vec![false; batch];
    let mut events = 0;

    for _ in 0..cfg.n_steps {
        let (energies, grad) = energy_and_input_grad(model, &x)?;
        for i in 0..batch {
            let g = grad.row(i);
            if !energies[i].is_finite() || g.iter().any(|v| !v.is_finite()) {
                let row = uniform_row(cfg, dim, rng);
                x.row_mut(i).copy_from_slice(&row);
                diverged[i] = true;
                events += 1;
                continue;
            }
            let row = x.row_mut(i);
            for (xv, &gv) in row.iter_mut().zip(g) {
                let gv = match cfg.grad_clip {
                    Some(c) => gv.clamp(-c, c),
                    None => gv,
                };
                *xv -= half_step * gv;
                if let Some(n) = &noise {
                    *xv += n.sample(rng);
                }
                if cfg.clamp_to_init_range {
                    *xv = xv.clamp(cfg.init_low, cfg.init_high);
                }
            }
        }
    }

    for (i, slot) in slots.iter().enumerate() {
        buffer.write(*slot, x.row(i));
    }
    if events > 0 {
        log::debug!("SGLD: {events} non-finite events, chains re-initialized");
    }
    Ok(SgldOutput {
        samples: x,
        fresh_chains: fresh,
        diverged_chains: diverged.iter().filter(|d| **d).count(),
        divergence_events: events,
    })
}

// ---------------------------------------------------------------------------
// Losses and gradients
// ---------------------------------------------------------------------------

fn collect_grads(bound: &BoundModel, mut grads: Gradients) -> GradientMap {
    bound
        .param_vars()
        .into_iter()
        .filter_map(|(k, v)| grads.take(v).map(|g| (k, g)))
        .collect()
}

/// `mean E_total(data) − mean E_total(negatives)` on the tape.
fn nll_surrogate_on(
    model: &HybridModel,
    tape: &mut Tape,
    bound: &mut BoundModel,
    data: &Tensor,
    negatives: &Tensor,
) -> Result<Var, TrainError> {
    let mut mean_energy = |t: &Tensor, tape: &mut Tape| -> Result<Var, TrainError> {
        let x = tape.constant(t.clone());
        let f = model.features_on(tape, bound, x)?;
        let e = model.energies_on(tape, bound, f)?;
        let et = model.total_energy_on(tape, e)?;
        Ok(tape.mean(et))
    };
    let pos = mean_energy(data, tape)?;
    let neg = mean_energy(negatives, tape)?;
    Ok(tape.sub(pos, neg)?)
}

/// Gradient of the sampled negative log-likelihood: the data-energy
/// gradient minus the negative-sample energy gradient, each batch-averaged.
/// Returns the surrogate value alongside.
pub fn nll_gradient(
    model: &HybridModel,
    data: &Tensor,
    negatives: &Tensor,
) -> Result<(f64, GradientMap), TrainError> {
    if data.rows() == 0 || data.is_empty() {
        return Err(TrainError::EmptyBatch("data"));
    }
    if negatives.rows() == 0 || negatives.is_empty() {
        return Err(TrainError::EmptyBatch("negative"));
    }
    let mut tape = Tape::new();
    let mut bound = model.bind(&mut tape, true);
    let s = nll_surrogate_on(model, &mut tape, &mut bound, data, negatives)?;
    let value = tape.value(s).item();
    let grads = tape.backward_from(s, &Tensor::scalar(1.0))?;
    Ok((value, collect_grads(&bound, grads)))
}

/// Per-term values of the joint objective.
///
/// `nll_term` is the contrastive surrogate already multiplied by the NLL
/// weight, so `total == ce_term + nll_term + lambda · tie_term`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_term: f64,
    pub nll_term: f64,
    pub tie_term: f64,
    pub total: f64,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub nll_weight: f64,
}

/// Joint loss and its gradient for every parameter.
///
/// `labeled` rows pair with `soft_targets` rows for the cross-entropy;
/// `all` and `negatives` feed the NLL term and may be `None` when
/// `weights.nll_weight == 0`.
pub fn joint_loss_and_grads(
    model: &HybridModel,
    labeled: &Tensor,
    soft_targets: &Tensor,
    all: Option<&Tensor>,
    negatives: Option<&Tensor>,
    weights: LossWeights,
) -> Result<(LossBreakdown, GradientMap), TrainError> {
    let n_lab = if labeled.is_empty() {
        0
    } else {
        labeled.rows()
    };
    if n_lab > 0 {
        if soft_targets.shape() != [n_lab, model.classes()] {
            return Err(TrainError::Diff(DiffError::ShapeMismatch {
                op: "soft cross-entropy",
                lhs: labeled.shape().to_vec(),
                rhs: soft_targets.shape().to_vec(),
            }));
        }
        for r in 0..n_lab {
            let row = soft_targets.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| !(*v >= 0.0)) {
                return Err(TrainError::TargetNotNormalized { row: r, sum });
            }
        }
    }

    let mut tape = Tape::new();
    let mut bound = model.bind(&mut tape, true);

    let ce = if n_lab > 0 {
        let x = tape.constant(labeled.clone());
        let f = model.features_on(&mut tape, &bound, x)?;
        let z = model.logits_on(&mut tape, &bound, f)?;
        let logp = tape.log_softmax_rows(z)?;
        let t = tape.constant(soft_targets.clone());
        let prod = tape.mul(t, logp)?;
        let s = tape.sum(prod);
        tape.scale(s, -1.0 / n_lab as f64)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let nll = if weights.nll_weight > 0.0 {
        let data = all.ok_or(TrainError::EmptyBatch("data"))?;
        let neg = negatives.ok_or(TrainError::EmptyBatch("negative"))?;
        if data.is_empty() {
            return Err(TrainError::EmptyBatch("data"));
        }
        if neg.is_empty() {
            return Err(TrainError::EmptyBatch("negative"));
        }
        let s = nll_surrogate_on(model, &mut tape, &mut bound, data, neg)?;
        tape.scale(s, weights.nll_weight)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let tie = model.tying_penalty_on(&mut tape, &mut bound)?;
    let tie_w = tape.scale(tie, weights.lambda);
    let partial = tape.add(ce, nll)?;
    let total = tape.add(partial, tie_w)?;

    let breakdown = LossBreakdown {
        ce_term: tape.value(ce).item(),
        nll_term: tape.value(nll).item(),
        tie_term: tape.value(tie).item(),
        total: tape.value(total).item(),
        lambda: weights.lambda,
    };
    let grads = tape.backward_from(total, &Tensor::scalar(1.0))?;
    Ok((breakdown, collect_grads(&bound, grads)))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<ParamKey, Tensor>,
    second: BTreeMap<ParamKey, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, key: ParamKey) -> Option<&Tensor> {
        self.first.get(&key)
    }

    pub fn second_moment(&self, key: ParamKey) -> Option<&Tensor> {
        self.second.get(&key)
    }

    /// One bias-corrected Adam update. Non-finite gradients skip the step
    /// entirely. The covariance factor's diagonal is re-floored afterwards.
    pub fn adam_step(&mut self, model: &mut HybridModel, grads: &GradientMap) -> StepOutcome {
        if let Some((key, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            log::warn!("non-finite gradient for {key:?}; optimizer step skipped");
            return StepOutcome::SkippedNonFinite;
        }
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);

        for (&key, g) in grads {
            let param = model.param_mut(key);
            debug_assert_eq!(param.shape(), g.shape());
            let m = self
                .first
                .entry(key)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(key)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let iter = param
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((p, m), v), &g) in iter {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        model.ebm.project_diagonal();
        StepOutcome::Applied
    }
}

// ---------------------------------------------------------------------------
// Epochs
// ---------------------------------------------------------------------------

/// Training samples with an optional target distribution each. Samples
/// without a target only feed the likelihood term.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub samples: Tensor,
    pub targets: Vec<Option<Vec<f64>>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_targeted(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Optimizer and sampler state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub adam: AdamState,
    pub buffer: ReplayBuffer,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig, input_dim: usize) -> Self {
        TrainerState {
            adam: AdamState::new(cfg.optimizer.clone()),
            buffer: ReplayBuffer::new(cfg.buffer_capacity, input_dim),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub ce: f64,
    pub nll: f64,
    pub tie: f64,
    pub total: f64,
    pub batches: usize,
    pub diverged_chains: usize,
    pub skipped_steps: usize,
    pub wall_ms: u128,
}

/// Splits `set` into mini-batches with targeted and untargeted samples
/// dealt round-robin, so every batch holds both kinds in proportion.
fn make_batches<R: Rng + ?Sized>(
    set: &TrainingSet,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut targeted: Vec<usize> = (0..set.len())
        .filter(|&i| set.targets[i].is_some())
        .collect();
    let mut rest: Vec<usize> = (0..set.len())
        .filter(|&i| set.targets[i].is_none())
        .collect();
    targeted.shuffle(rng);
    rest.shuffle(rng);
    let nb = set.len().div_ceil(batch_size).max(1);
    let mut batches = vec![Vec::new(); nb];
    for (k, i) in targeted.into_iter().enumerate() {
        batches[k % nb].push(i);
    }
    for (k, i) in rest.into_iter().enumerate() {
        batches[(nb - 1 - k % nb) % nb].push(i);
    }
    batches
}

/// One pass over `set`. Targeted samples feed the cross-entropy; every
/// sample feeds the likelihood term.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut HybridModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    state: &mut TrainerState,
    rng: &mut R,
) -> Result<EpochDiagnostics, TrainError> {
    let start = Instant::now();
    if set.n_targeted() == 0 {
        return Err(TrainError::NoLabeledSamples);
    }
    let weights = LossWeights {
        lambda: cfg.lambda,
        nll_weight: cfg.nll_weight,
    };
    let c = model.classes();
    let mut diag = EpochDiagnostics::default();
    let mut chains = 0;

    for batch in make_batches(set, cfg.batch_size, rng) {
        let lab: Vec<usize> = batch
            .iter()
            .copied()
            .filter(|&i| set.targets[i].is_some())
            .collect();
        if lab.is_empty() && cfg.nll_weight == 0.0 && cfg.lambda == 0.0 {
            continue;
        }
        let labeled = set.samples.select_rows(&lab);
        let mut tdata = Vec::with_capacity(lab.len() * c);
        for &i in &lab {
            tdata.extend_from_slice(set.targets[i].as_ref().expect("targeted"));
        }
        let targets = Tensor::new(vec![lab.len(), c], tdata)?;

        let (all, negatives) = if cfg.nll_weight > 0.0 {
            let all = set.samples.select_rows(&batch);
            let out = sgld_sample(model, &cfg.sgld, &mut state.buffer, batch.len(), rng)?;
            chains += batch.len();
            diag.diverged_chains += out.diverged_chains;
            (Some(all), Some(out.samples))
        } else {
            (None, None)
        };

        let (loss, grads) = joint_loss_and_grads(
            model,
            &labeled,
            &targets,
            all.as_ref(),
            negatives.as_ref(),
            weights,
        )?;
        if state.adam.adam_step(model, &grads) == StepOutcome::SkippedNonFinite {
            diag.skipped_steps += 1;
        }
        diag.ce += loss.ce_term;
        diag.nll += loss.nll_term;
        diag.tie += loss.tie_term;
        diag.total += loss.total;
        diag.batches += 1;
    }

    if chains > 0 && diag.diverged_chains >= chains {
        return Err(TrainError::AllChainsDiverged { chains });
    }
    if diag.batches > 0 {
        let n = diag.batches as f64;
        diag.ce /= n;
        diag.nll /= n;
        diag.tie /= n;
        diag.total /= n;
    }
    diag.wall_ms = start.elapsed().as_millis();
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_clip_accepts_number_false_or_null() {
        let c: SgldConfig = serde_json::from_str(r#"{"grad_clip": 0.5}"#).unwrap();
        assert_eq!(c.grad_clip, Some(0.5));
        let c: SgldConfig = serde_json::from_str(r#"{"grad_clip": false}"#).unwrap();
        assert_eq!(c.grad_clip, None);
        let c: SgldConfig = serde_json::from_str(r#"{"grad_clip": null}"#).unwrap();
        assert_eq!(c.grad_clip, None);
        assert!(serde_json::from_str::<SgldConfig>(r#"{"grad_clip": true}"#).is_err());
        assert_eq!(
            serde_json::from_str::<SgldConfig>("{}").unwrap(),
            SgldConfig::default()
        );
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut c = TrainConfig::default();
        c.sgld.grad_clip = None;
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = TrainConfig::default();
        c.sgld.grad_clip = Some(0.0);
        assert!(c.validate().unwrap_err().to_string().contains("grad_clip"));
        let mut c = TrainConfig::default();
        c.optimizer.beta2 = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lambda: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn defaults() {
        let s = SgldConfig::default();
        assert_eq!((s.n_steps, s.step_size, s.noise_variance), (20, 1.0, 1.0));
        assert_eq!((s.reinit_prob, s.grad_clip), (0.05, Some(0.01)));
        let t = TrainConfig::default();
        assert_eq!((t.lambda, t.nll_weight), (0.001, 1.0));
        assert_eq!(t.optimizer.learning_rate, 1e-4);
    }
}
