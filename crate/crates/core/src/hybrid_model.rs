//! Joint classifier / energy-based model over a shared feature extractor.
//!
//! The classifier head is a softmax over `w_cᵀ f(x) + b_c`. The EBM head
//! models features as a Gaussian per class with a shared covariance
//! `Σ = L·Lᵀ`:
//!
//! ```text
//! E_c(x)       = ½ (f(x) − μ_c)ᵀ Σ⁻¹ (f(x) − μ_c)
//! E_total(x)   = −log Σ_c exp(−E_c(x))
//! p_ebm(c | x) = softmax_c(μ_cᵀ Σ⁻¹ f(x) + ln π_c − ½ μ_cᵀ Σ⁻¹ μ_c)
//! ```
//!
//! `Σ⁻¹` is only ever applied through triangular solves against `L`. The
//! diagonal of `L` is the softplus of an unconstrained parameter, floored at
//! [`EPS_PD`] after every optimizer step.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{softplus, Activation, BoundMlp, DiffError, MlpExtractor, Tape, Tensor, Var};

/// Floor on the diagonal of the covariance factor `L`.
pub const EPS_PD: f64 = 1e-6;

const CHECKPOINT_FORMAT: &str = "ebpl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {got} features, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("class index {class} out of range for {classes} classes")]
    ClassIndex { class: usize, classes: usize },
    #[error("covariance factor diagonal L[{index},{index}] = {value:e} is below {EPS_PD:e}; recondition Σ")]
    Singular { index: usize, value: f64 },
    #[error("covariance factor is not lower triangular (entry [{row},{col}] = {value})")]
    NotLowerTriangular { row: usize, col: usize, value: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `[C, D]`, row `c` is `w_c`.
    pub weights: Tensor,
    /// `[C]`
    pub biases: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbmHead {
    /// `[C, D]`, row `c` is `μ_c`.
    pub means: Tensor,
    /// `[D, D]` unconstrained; `L` = strict lower part + softplus(diagonal).
    pub chol_raw: Tensor,
    /// `ln π_c`, fixed.
    pub log_priors: Vec<f64>,
    /// Ignore the strict lower part of `chol_raw` (diagonal `Σ`).
    pub diagonal_only: bool,
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y − 1), stable for large and small y
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl EbmHead {
    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.means.cols()
    }

    /// Builds a head from an explicit Cholesky factor.
    pub fn from_cholesky(
        means: Tensor,
        l: &Tensor,
        diagonal_only: bool,
    ) -> Result<Self, ModelError> {
        let d = means.cols();
        if l.shape() != [d, d] {
            return Err(ModelError::Dimension {
                expected: d,
                got: l.rows(),
            });
        }
        let mut raw = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                let v = l.at(i, j);
                if j > i && v != 0.0 {
                    return Err(ModelError::NotLowerTriangular {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                if i == j {
                    if !(v >= EPS_PD) {
                        return Err(ModelError::Singular { index: i, value: v });
                    }
                    raw.set(i, i, inverse_softplus(v));
                } else if j < i {
                    raw.set(i, j, v);
                }
            }
        }
        let c = means.rows();
        Ok(EbmHead {
            means,
            chol_raw: raw,
            log_priors: vec![-(c as f64).ln(); c],
            diagonal_only,
        })
    }

    /// The factor `L`.
    pub fn cholesky(&self) -> Tensor {
        let d = self.feature_dim();
        let mut l = Tensor::zeros(&[d, d]);
        for i in 0..d {
            l.set(i, i, softplus(self.chol_raw.at(i, i)));
            if !self.diagonal_only {
                for j in 0..i {
                    l.set(i, j, self.chol_raw.at(i, j));
                }
            }
        }
        l
    }

    /// `Σ = L·Lᵀ`.
    pub fn covariance(&self) -> Tensor {
        let l = self.cholesky();
        let d = l.rows();
        let mut s = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                let v: f64 = (0..=i.min(j)).map(|k| l.at(i, k) * l.at(j, k)).sum();
                s.set(i, j, v);
            }
        }
        s
    }

    /// Raises any diagonal entry of `L` below [`EPS_PD`] back to the floor.
    pub fn project_diagonal(&mut self) {
        let floor = inverse_softplus(EPS_PD);
        for i in 0..self.feature_dim() {
            let v = self.chol_raw.at(i, i);
            if !(softplus(v) >= EPS_PD) {
                self.chol_raw.set(i, i, floor);
            }
        }
    }

    pub fn min_cholesky_diagonal(&self) -> f64 {
        (0..self.feature_dim())
            .map(|i| softplus(self.chol_raw.at(i, i)))
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub activation: Activation,
    pub diagonal_covariance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 2,
            hidden: vec![32, 32],
            feature_dim: 8,
            classes: 2,
            activation: Activation::Tanh,
            diagonal_covariance: false,
        }
    }
}

/// Identifies one trainable parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    LayerWeight(usize),
    LayerBias(usize),
    ClassifierWeight,
    ClassifierBias,
    Means,
    CholRaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub extractor: MlpExtractor,
    pub clf: ClassifierHead,
    pub ebm: EbmHead,
}

/// Tape handles for every parameter of a [`HybridModel`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub mlp: BoundMlp,
    pub clf_weight: Var,
    pub clf_bias: Var,
    pub means: Var,
    pub chol_raw: Var,
    chol: Option<Var>,
}

impl BoundModel {
    pub fn param_vars(&self) -> Vec<(ParamKey, Var)> {
        let mut out = Vec::with_capacity(self.mlp.layers.len() * 2 + 4);
        for (i, &(w, b)) in self.mlp.layers.iter().enumerate() {
            out.push((ParamKey::LayerWeight(i), w));
            out.push((ParamKey::LayerBias(i), b));
        }
        out.push((ParamKey::ClassifierWeight, self.clf_weight));
        out.push((ParamKey::ClassifierBias, self.clf_bias));
        out.push((ParamKey::Means, self.means));
        out.push((ParamKey::CholRaw, self.chol_raw));
        out
    }
}

impl HybridModel {
    /// Fresh model: extractor weights ~ N(0, 2/fan_in), classifier head
    /// zero, means ~ N(0, 0.01), `L = I`, uniform priors.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        if cfg.classes < 1 || cfg.input_dim < 1 || cfg.feature_dim < 1 {
            return Err(ModelError::Config(format!(
                "classes, input_dim and feature_dim must be positive (got {}, {}, {})",
                cfg.classes, cfg.input_dim, cfg.feature_dim
            )));
        }
        if cfg.hidden.contains(&0) {
            return Err(ModelError::Config("hidden layer of width 0".into()));
        }
        let extractor = MlpExtractor::new(
            cfg.input_dim,
            &cfg.hidden,
            cfg.feature_dim,
            cfg.activation,
            rng,
        );
        let (c, d) = (cfg.classes, cfg.feature_dim);
        let normal = Normal::new(0.0, 0.1).expect("positive std");
        let means = Tensor::new(vec![c, d], (0..c * d).map(|_| normal.sample(rng)).collect())?;
        Self::from_parts(
            extractor,
            means,
            &Tensor::identity(d),
            cfg.diagonal_covariance,
        )
    }

    /// Model with a zero classifier head around the given extractor and EBM.
    pub fn from_parts(
        extractor: MlpExtractor,
        means: Tensor,
        cholesky: &Tensor,
        diagonal_only: bool,
    ) -> Result<Self, ModelError> {
        if means.cols() != extractor.feature_dim {
            return Err(ModelError::Dimension {
                expected: extractor.feature_dim,
                got: means.cols(),
            });
        }
        let c = means.rows();
        let d = extractor.feature_dim;
        let ebm = EbmHead::from_cholesky(means, cholesky, diagonal_only)?;
        Ok(HybridModel {
            extractor,
            clf: ClassifierHead {
                weights: Tensor::zeros(&[c, d]),
                biases: Tensor::zeros(&[c]),
            },
            ebm,
        })
    }

    pub fn classes(&self) -> usize {
        self.ebm.classes()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim(),
            hidden: self.extractor.hidden_dims(),
            feature_dim: self.feature_dim(),
            classes: self.classes(),
            activation: self
                .extractor
                .activations
                .first()
                .copied()
                .unwrap_or_default(),
            diagonal_covariance: self.ebm.diagonal_only,
        }
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for i in 0..self.extractor.layers.len() {
            keys.push(ParamKey::LayerWeight(i));
            keys.push(ParamKey::LayerBias(i));
        }
        keys.extend([
            ParamKey::ClassifierWeight,
            ParamKey::ClassifierBias,
            ParamKey::Means,
            ParamKey::CholRaw,
        ]);
        keys
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        match key {
            ParamKey::LayerWeight(i) => &self.extractor.layers[i].weight,
            ParamKey::LayerBias(i) => &self.extractor.layers[i].bias,
            ParamKey::ClassifierWeight => &self.clf.weights,
            ParamKey::ClassifierBias => &self.clf.biases,
            ParamKey::Means => &self.ebm.means,
            ParamKey::CholRaw => &self.ebm.chol_raw,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        match key {
            ParamKey::LayerWeight(i) => &mut self.extractor.layers[i].weight,
            ParamKey::LayerBias(i) => &mut self.extractor.layers[i].bias,
            ParamKey::ClassifierWeight => &mut self.clf.weights,
            ParamKey::ClassifierBias => &mut self.clf.biases,
            ParamKey::Means => &mut self.ebm.means,
            ParamKey::CholRaw => &mut self.ebm.chol_raw,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.param_keys()
            .into_iter()
            .all(|k| self.param(k).is_finite())
    }

    // -----------------------------------------------------------------------
    // Graph construction
    // -----------------------------------------------------------------------

    /// Puts every parameter on `tape`; `trainable` controls whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mlp = self.extractor.bind(tape, trainable);
        BoundModel {
            mlp,
            clf_weight: tape.leaf(self.clf.weights.clone().with_grad(trainable)),
            clf_bias: tape.leaf(self.clf.biases.clone().with_grad(trainable)),
            means: tape.leaf(self.ebm.means.clone().with_grad(trainable)),
            chol_raw: tape.leaf(self.ebm.chol_raw.clone().with_grad(trainable)),
            chol: None,
        }
    }

    fn chol(&self, tape: &mut Tape, bound: &mut BoundModel) -> Result<Var, DiffError> {
        if let Some(l) = bound.chol {
            return Ok(l);
        }
        let l = tape.chol_factor(bound.chol_raw, self.ebm.diagonal_only)?;
        bound.chol = Some(l);
        Ok(l)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(), ModelError> {
        let t = tape.value(x);
        if t.shape().len() != 2 || t.cols() != self.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.input_dim(),
                got: t.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// `f(x)` for a batch `[n, input_dim] -> [n, D]`.
    pub fn features_on(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
    ) -> Result<Var, ModelError> {
        self.check_input(tape, x)?;
        Ok(self.extractor.apply(tape, &bound.mlp, x)?)
    }

    /// Classifier logits `w_cᵀ f + b_c`: `[n, D] -> [n, C]`.
    pub fn logits_on(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        feats: Var,
    ) -> Result<Var, DiffError> {
        let wt = tape.transpose(bound.clf_weight)?;
        let z = tape.matmul(feats, wt)?;
        tape.add_row(z, bound.clf_bias)
    }

    /// Class energies `E_c`: `[n, D] -> [n, C]`.
    pub fn energies_on(
        &self,
        tape: &mut Tape,
        bound: &mut BoundModel,
        feats: Var,
    ) -> Result<Var, DiffError> {
        let n = tape.value(feats).rows();
        let l = self.chol(tape, bound)?;
        let diff = tape.pairwise_diff(feats, bound.means)?;
        let z = tape.solve_lower(diff, l)?;
        let sq = tape.square(z);
        let s = tape.sum_rows(sq)?;
        let e = tape.scale(s, 0.5);
        tape.reshape(e, vec![n, self.classes()])
    }

    /// `E_total = −logsumexp(−E)`: `[n, C] -> [n]`.
    pub fn total_energy_on(&self, tape: &mut Tape, energies: Var) -> Result<Var, DiffError> {
        let neg = tape.neg(energies);
        let lse = tape.logsumexp_rows(neg)?;
        Ok(tape.neg(lse))
    }

    /// `(L⁻¹μ_c, Σ⁻¹μ_c)` rows, each `[C, D]`.
    fn whitened_means(
        &self,
        tape: &mut Tape,
        bound: &mut BoundModel,
    ) -> Result<(Var, Var), DiffError> {
        let l = self.chol(tape, bound)?;
        let zm = tape.solve_lower(bound.means, l)?;
        let prec_mu = tape.solve_lower_t(zm, l)?;
        Ok((zm, prec_mu))
    }

    /// EBM-derived posterior logits `μ_cᵀΣ⁻¹f + ln π_c − ½μ_cᵀΣ⁻¹μ_c`.
    pub fn ebm_logits_on(
        &self,
        tape: &mut Tape,
        bound: &mut BoundModel,
        feats: Var,
    ) -> Result<Var, DiffError> {
        let (zm, prec_mu) = self.whitened_means(tape, bound)?;
        let pt = tape.transpose(prec_mu)?;
        let lin = tape.matmul(feats, pt)?;
        let sq = tape.square(zm);
        let q = tape.sum_rows(sq)?;
        let q = tape.scale(q, -0.5);
        let prior = tape.constant(Tensor::vector(self.ebm.log_priors.clone()));
        let offset = tape.add(q, prior)?;
        tape.add_row(lin, offset)
    }

    /// `Σ_c ‖w_c − Σ⁻¹μ_c‖² + (b_c + ½μ_cᵀΣ⁻¹μ_c)²`.
    pub fn tying_penalty_on(
        &self,
        tape: &mut Tape,
        bound: &mut BoundModel,
    ) -> Result<Var, DiffError> {
        let (zm, prec_mu) = self.whitened_means(tape, bound)?;
        let wd = tape.sub(bound.clf_weight, prec_mu)?;
        let wd2 = tape.square(wd);
        let wterm = tape.sum(wd2);
        let sq = tape.square(zm);
        let q = tape.sum_rows(sq)?;
        let half_q = tape.scale(q, 0.5);
        let bd = tape.add(bound.clf_bias, half_q)?;
        let bd2 = tape.square(bd);
        let bterm = tape.sum(bd2);
        tape.add(wterm, bterm)
    }

    // -----------------------------------------------------------------------
    // Inference
    // -----------------------------------------------------------------------

    fn as_batch(&self, x: &Tensor) -> Result<(Tensor, bool), ModelError> {
        match x.shape() {
            [d] if *d == self.input_dim() => Ok((x.clone().reshaped(vec![1, *d])?, true)),
            [_, d] if *d == self.input_dim() => Ok((x.clone(), false)),
            s => Err(ModelError::Dimension {
                expected: self.input_dim(),
                got: s.last().copied().unwrap_or(0),
            }),
        }
    }

    fn eval<F>(&self, x: &Tensor, f: F) -> Result<Tensor, ModelError>
    where
        F: FnOnce(&Self, &mut Tape, &mut BoundModel, Var) -> Result<Var, ModelError>,
    {
        let (batch, single) = self.as_batch(x)?;
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape, false);
        let xv = tape.constant(batch);
        let out = f(self, &mut tape, &mut bound, xv)?;
        let t = tape.value(out).clone();
        if single {
            let shape = t.shape()[1..].to_vec();
            Ok(t.reshaped(shape)?)
        } else {
            Ok(t)
        }
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.eval(x, |m, tape, b, xv| m.features_on(tape, b, xv))
    }

    /// Softmax posterior of the classifier head. `[d] -> [C]` or `[n, d] -> [n, C]`.
    pub fn classifier_posterior(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let logp = self.eval(x, |m, tape, b, xv| {
            let f = m.features_on(tape, b, xv)?;
            let z = m.logits_on(tape, b, f)?;
            Ok(tape.log_softmax_rows(z)?)
        })?;
        Ok(logp.map(f64::exp))
    }

    pub fn class_energies(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.eval(x, |m, tape, b, xv| {
            let f = m.features_on(tape, b, xv)?;
            Ok(m.energies_on(tape, b, f)?)
        })
    }

    /// `E_c(x)` for a single input vector.
    pub fn class_energy(&self, x: &Tensor, class: usize) -> Result<f64, ModelError> {
        if class >= self.classes() {
            return Err(ModelError::ClassIndex {
                class,
                classes: self.classes(),
            });
        }
        let e = self.class_energies(x)?;
        Ok(e.data()[class])
    }

    /// `E_total(x)`; scalar for a vector input, `[n]` for a batch.
    pub fn total_energy(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.eval(x, |m, tape, b, xv| {
            let f = m.features_on(tape, b, xv)?;
            let e = m.energies_on(tape, b, f)?;
            Ok(m.total_energy_on(tape, e)?)
        })
    }

    /// Class posterior implied by the Gaussian EBM and the priors.
    pub fn ebm_posterior(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let logp = self.eval(x, |m, tape, b, xv| {
            let f = m.features_on(tape, b, xv)?;
            let z = m.ebm_logits_on(tape, b, f)?;
            Ok(tape.log_softmax_rows(z)?)
        })?;
        Ok(logp.map(f64::exp))
    }

    pub fn tying_penalty(&self) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape, false);
        let p = self.tying_penalty_on(&mut tape, &mut bound)?;
        Ok(tape.value(p).item())
    }

    /// Sets `w_c := Σ⁻¹μ_c` and `b_c := −½μ_cᵀΣ⁻¹μ_c`, zeroing the tying penalty.
    pub fn tie_classifier_to_ebm(&mut self) -> Result<(), ModelError> {
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape, false);
        let (zm, prec_mu) = self.whitened_means(&mut tape, &mut bound)?;
        self.clf.weights = tape.value(prec_mu).clone();
        let zm = tape.value(zm);
        let biases = (0..self.classes())
            .map(|c| -0.5 * zm.row(c).iter().map(|v| v * v).sum::<f64>())
            .collect();
        self.clf.biases = Tensor::vector(biases);
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Checkpoints
    // -----------------------------------------------------------------------

    pub fn to_checkpoint_string(&self) -> Result<String, ModelError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: self.config(),
            model: self.clone(),
        };
        serde_json::to_string_pretty(&ck).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unexpected format tag `{}`",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let model = ck.model;
        if model.config() != ck.architecture {
            return Err(ModelError::Checkpoint(
                "architecture block disagrees with parameter shapes".into(),
            ));
        }
        model.validate()?;
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }

    /// Shape consistency between extractor and heads.
    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, d) = (self.classes(), self.feature_dim());
        let bad = |what: &str| ModelError::Checkpoint(format!("inconsistent shape for {what}"));
        if self.clf.weights.shape() != [c, d] {
            return Err(bad("classifier weights"));
        }
        if self.clf.biases.shape() != [c] {
            return Err(bad("classifier biases"));
        }
        if self.ebm.chol_raw.shape() != [d, d] || self.ebm.log_priors.len() != c {
            return Err(bad("EBM head"));
        }
        let mut fan_in = self.input_dim();
        for l in &self.extractor.layers {
            if l.weight.rows() != fan_in || l.bias.len() != l.weight.cols() {
                return Err(bad("extractor layer"));
            }
            fan_in = l.weight.cols();
        }
        if fan_in != d || self.extractor.activations.len() + 1 != self.extractor.layers.len() {
            return Err(bad("extractor output"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture: ModelConfig,
    model: HybridModel,
}
