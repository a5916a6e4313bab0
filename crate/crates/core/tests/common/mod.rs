//! Shared oracles for the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ebpl_core::curriculum::PlSchedule;
use ebpl_core::diffcore::{
    backward, forward, Activation, DiffError, MlpExtractor, Tape, Tensor, Var,
};
use ebpl_core::ebm_train::{joint_loss_and_grads, LossWeights, SgldConfig};
use ebpl_core::experiment::{DatasetSpec, ExperimentConfig, ModelSpec, SplitSpec};
use ebpl_core::hybrid_model::{HybridModel, ModelConfig, ParamKey};
use ebpl_core::metrics::PredictionRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps exact zeros comparable.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn normal_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .unwrap()
}

/// Normal entries pushed at least `gap` away from zero (for kinked ops).
pub fn off_zero_tensor<R: Rng>(shape: &[usize], gap: f64, rng: &mut R) -> Tensor {
    normal_tensor(shape, rng).map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

/// Lower-triangular factor with diagonal in [0.7, 1.5] and small off-diagonal.
pub fn well_conditioned_lower<R: Rng>(d: usize, rng: &mut R) -> Tensor {
    let mut l = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..i {
            l.set(i, j, 0.3 * rng.random_range(-1.0..1.0));
        }
        l.set(i, i, rng.random_range(0.7..1.5));
    }
    l
}

pub type GraphFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>;
type Graph<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>;

fn weighted_output(graph: Graph<'_>, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let (out, _) = forward(|t, v| graph(t, v), inputs).unwrap();
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Reverse-mode gradient of `⟨w, graph(inputs)⟩` against central
/// differences for every input element. Returns the worst relative error.
pub fn check_graph<R: Rng>(graph: Graph<'_>, inputs: &[Tensor], rng: &mut R) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad(true)).collect();
    let (out, tape) = forward(|t, v| graph(t, v), &leaves).unwrap();
    let weights = normal_tensor(out.shape(), rng);
    let grads = backward(&tape, &weights).unwrap();
    let by_index: BTreeMap<usize, Tensor> =
        grads.iter().map(|(v, g)| (v.index(), g.clone())).collect();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = &by_index[&i];
        assert_eq!(analytic.shape(), input.shape());
        for j in 0..input.len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += FD_STEP;
            let up = weighted_output(graph, &probe, &weights);
            probe[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = weighted_output(graph, &probe, &weights);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub graph: Box<GraphFn>,
}

fn case(
    name: &str,
    inputs: Vec<Tensor>,
    graph: impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + 'static,
) -> OpCase {
    OpCase {
        name: name.to_string(),
        inputs,
        graph: Box::new(graph),
    }
}

/// One randomized case per differentiable tape operation.
pub fn op_cases<R: Rng>(rng: &mut R) -> Vec<OpCase> {
    let r = rng.random_range(1..4usize);
    let c = rng.random_range(1..4usize);
    let k = rng.random_range(1..4usize);
    let d = rng.random_range(1..4usize);
    let slope = rng.random_range(0.01..0.5);
    let factor = rng.random_range(-2.0..2.0);
    let m = |rng: &mut R, a: usize, b: usize| normal_tensor(&[a, b], rng);

    vec![
        case("matmul", vec![m(rng, r, k), m(rng, k, c)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case(
            "add_row",
            vec![m(rng, r, c), normal_tensor(&[c], rng)],
            |t, v| t.add_row(v[0], v[1]),
        ),
        case("add", vec![m(rng, r, c), m(rng, r, c)], |t, v| {
            t.add(v[0], v[1])
        }),
        case("sub", vec![m(rng, r, c), m(rng, r, c)], |t, v| {
            t.sub(v[0], v[1])
        }),
        case("mul", vec![m(rng, r, c), m(rng, r, c)], |t, v| {
            t.mul(v[0], v[1])
        }),
        case("scale", vec![m(rng, r, c)], move |t, v| {
            Ok(t.scale(v[0], factor))
        }),
        case("neg", vec![m(rng, r, c)], |t, v| Ok(t.neg(v[0]))),
        case("tanh", vec![m(rng, r, c)], |t, v| Ok(t.tanh(v[0]))),
        case("relu", vec![off_zero_tensor(&[r, c], 1e-2, rng)], |t, v| {
            Ok(t.relu(v[0]))
        }),
        case(
            "leaky_relu",
            vec![off_zero_tensor(&[r, c], 1e-2, rng)],
            move |t, v| Ok(t.leaky_relu(v[0], slope)),
        ),
        case("square", vec![m(rng, r, c)], |t, v| Ok(t.square(v[0]))),
        case("softplus", vec![m(rng, r, c).map(|x| 3.0 * x)], |t, v| {
            Ok(t.softplus(v[0]))
        }),
        case("sum", vec![m(rng, r, c)], |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![m(rng, r, c)], |t, v| Ok(t.mean(v[0]))),
        case("sum_rows", vec![m(rng, r, c)], |t, v| t.sum_rows(v[0])),
        case(
            "logsumexp_rows",
            vec![m(rng, r, c).map(|x| 5.0 * x)],
            |t, v| t.logsumexp_rows(v[0]),
        ),
        case(
            "log_softmax_rows",
            vec![m(rng, r, c).map(|x| 5.0 * x)],
            |t, v| t.log_softmax_rows(v[0]),
        ),
        case("pairwise_diff", vec![m(rng, r, d), m(rng, c, d)], |t, v| {
            t.pairwise_diff(v[0], v[1])
        }),
        case(
            "solve_lower",
            vec![m(rng, r, d), well_conditioned_lower(d, rng)],
            |t, v| t.solve_lower(v[0], v[1]),
        ),
        case(
            "solve_lower_t",
            vec![m(rng, r, d), well_conditioned_lower(d, rng)],
            |t, v| t.solve_lower_t(v[0], v[1]),
        ),
        case("chol_factor", vec![m(rng, d, d)], |t, v| {
            t.chol_factor(v[0], false)
        }),
        case("chol_factor_diagonal", vec![m(rng, d, d)], |t, v| {
            t.chol_factor(v[0], true)
        }),
        case("reshape", vec![m(rng, r, c)], move |t, v| {
            t.reshape(v[0], vec![c * r])
        }),
        case("transpose", vec![m(rng, r, c)], |t, v| t.transpose(v[0])),
        case(
            "linear",
            vec![m(rng, r, k), m(rng, k, c), normal_tensor(&[c], rng)],
            |t, v| t.linear(v[0], v[1], v[2]),
        ),
    ]
}

/// Random 3-layer MLP with every weight, bias and the input as leaves.
pub fn mlp_case<R: Rng>(activation: Activation, rng: &mut R) -> OpCase {
    let n = rng.random_range(1..4usize);
    let input_dim = rng.random_range(1..4usize);
    let hidden = vec![rng.random_range(2..5usize), rng.random_range(2..5usize)];
    let feature_dim = rng.random_range(1..4usize);
    let mlp = MlpExtractor::new(input_dim, &hidden, feature_dim, activation, rng);
    let mut inputs = vec![off_zero_tensor(&[n, input_dim], 1e-2, rng)];
    for l in &mlp.layers {
        inputs.push(l.weight.clone());
        // zero biases put dead ReLU units exactly on the kink
        inputs.push(normal_tensor(l.bias.shape(), rng));
    }
    let acts = mlp.activations.clone();
    OpCase {
        name: format!("mlp/{activation:?}"),
        inputs,
        graph: Box::new(move |t, v| {
            let mut h = v[0];
            for (i, pair) in v[1..].chunks(2).enumerate() {
                h = t.linear(h, pair[0], pair[1])?;
                if let Some(act) = acts.get(i) {
                    h = match *act {
                        Activation::Tanh => t.tanh(h),
                        Activation::Relu => t.relu(h),
                        Activation::LeakyRelu { slope } => t.leaky_relu(h, slope),
                    };
                }
            }
            Ok(h)
        }),
    }
}

pub fn random_model<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> HybridModel {
    let mut m = HybridModel::init(cfg, rng).unwrap();
    perturb_heads(&mut m, rng);
    m
}

/// Replaces the zero classifier head, means and factor with random values.
pub fn perturb_heads<R: Rng>(m: &mut HybridModel, rng: &mut R) {
    let (c, d) = (m.classes(), m.feature_dim());
    m.clf.weights = normal_tensor(&[c, d], rng);
    m.clf.biases = normal_tensor(&[c], rng);
    m.ebm.means = normal_tensor(&[c, d], rng);
    let mut raw = normal_tensor(&[d, d], rng).map(|v| 0.3 * v);
    for i in 0..d {
        raw.set(i, i, rng.random_range(-0.5..1.0));
    }
    m.ebm.chol_raw = raw;
}

pub fn small_model_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let activation = match rng.random_range(0..3) {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        _ => Activation::LeakyRelu { slope: 0.1 },
    };
    ModelConfig {
        input_dim: rng.random_range(1..4),
        hidden: vec![rng.random_range(2..5)],
        feature_dim: rng.random_range(1..4),
        classes: rng.random_range(2..4),
        activation,
        diagonal_covariance: rng.random_bool(0.3),
    }
}

pub fn random_soft_targets<R: Rng>(n: usize, c: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        t.row_mut(i)
            .iter_mut()
            .zip(&raw)
            .for_each(|(o, v)| *o = v / s);
    }
    t
}

/// Which terms of the joint loss a model-level check exercises.
#[derive(Clone, Copy, Debug)]
pub struct Terms {
    pub ce: bool,
    pub nll: bool,
    pub lambda: f64,
}

/// Joint-loss gradient against central differences in every parameter,
/// negatives frozen. Returns the worst relative error.
pub fn check_joint_loss<R: Rng>(cfg: &ModelConfig, terms: Terms, rng: &mut R) -> f64 {
    let model = random_model(cfg, rng);
    let n_lab = rng.random_range(1..4);
    let labeled = off_zero_tensor(&[n_lab, cfg.input_dim], 1e-2, rng);
    let targets = random_soft_targets(n_lab, cfg.classes, rng);
    let all = off_zero_tensor(&[rng.random_range(1..5), cfg.input_dim], 1e-2, rng);
    let negatives = off_zero_tensor(&[rng.random_range(1..5), cfg.input_dim], 1e-2, rng);
    let weights = LossWeights {
        lambda: terms.lambda,
        nll_weight: if terms.nll { 1.0 } else { 0.0 },
    };
    let empty = Tensor::zeros(&[0, cfg.input_dim]);
    let (lab, tgt) = if terms.ce {
        (&labeled, &targets)
    } else {
        (&empty, &targets)
    };
    let loss = |m: &HybridModel| {
        joint_loss_and_grads(m, lab, tgt, Some(&all), Some(&negatives), weights)
            .unwrap()
            .0
            .total
    };
    let (_, grads) =
        joint_loss_and_grads(&model, lab, tgt, Some(&all), Some(&negatives), weights).unwrap();

    let mut worst: f64 = 0.0;
    for key in model.param_keys() {
        let analytic = grads
            .get(&key)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.param(key).shape()));
        assert_eq!(analytic.shape(), model.param(key).shape(), "{key:?}");
        for j in 0..analytic.len() {
            let mut probe = model.clone();
            probe.param_mut(key).data_mut()[j] += FD_STEP;
            let up = loss(&probe);
            probe.param_mut(key).data_mut()[j] -= 2.0 * FD_STEP;
            let down = loss(&probe);
            worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

pub fn param_count(m: &HybridModel, key: ParamKey) -> usize {
    m.param(key).len()
}

// ---------------------------------------------------------------------------
// Calibration oracle
// ---------------------------------------------------------------------------

/// ECE by the definition: for each bin `((m−1)/M, m/M]`, scan every record.
pub fn brute_force_ece(records: &[PredictionRecord], bins: usize) -> f64 {
    let n = records.len() as f64;
    let mut total = 0.0;
    for m in 1..=bins {
        let lo = (m - 1) as f64 / bins as f64;
        let hi = m as f64 / bins as f64;
        let mut count = 0.0;
        let mut correct = 0.0;
        let mut conf = 0.0;
        for r in records {
            if r.confidence > lo && r.confidence <= hi {
                count += 1.0;
                conf += r.confidence;
                if r.predicted == r.truth {
                    correct += 1.0;
                }
            }
        }
        if count > 0.0 {
            total += count / n * (correct / count - conf / count).abs();
        }
    }
    total
}

/// Confidence ~ U(0.5, 1), correct with probability equal to the confidence.
pub fn calibrated_records<R: Rng>(n: usize, rng: &mut R) -> Vec<PredictionRecord> {
    (0..n)
        .map(|_| {
            let conf: f64 = rng.random_range(0.5..1.0);
            let correct = rng.random_bool(conf);
            PredictionRecord::new(0, if correct { 0 } else { 1 }, conf)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

/// Single-class model with `f(x) = x`, `μ = 0`, `Σ = I`: `E_total = ½‖x‖²`.
pub fn standard_gaussian_model(dim: usize) -> HybridModel {
    HybridModel::from_parts(
        MlpExtractor::identity(dim),
        Tensor::zeros(&[1, dim]),
        &Tensor::identity(dim),
        false,
    )
    .unwrap()
}

/// Plain Langevin chain: no clipping, clamping or re-initialization.
pub fn unadjusted_sgld(step: f64, n_steps: usize) -> SgldConfig {
    SgldConfig {
        n_steps,
        step_size: step,
        noise_variance: step,
        init_low: -1.0,
        init_high: 1.0,
        reinit_prob: 0.0,
        grad_clip: None,
        clamp_to_init_range: false,
    }
}

/// Stationary variance of `x ← (1 − α/2)x + N(0, α)`.
pub fn discretized_stationary_variance(alpha: f64) -> f64 {
    alpha / (1.0 - (1.0 - alpha / 2.0).powi(2))
}

// ---------------------------------------------------------------------------
// Two-moons comparison setup
// ---------------------------------------------------------------------------

/// Desk-scale two-moons configuration: 4 labels per class, noise 0.1.
pub fn two_moons_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetSpec::TwoMoons {
            n: 1000,
            noise: 0.1,
            n_test: 1000,
        },
        split: SplitSpec {
            labels_per_class: 4,
            val_frac: 0.3,
        },
        model: ModelSpec {
            hidden: vec![16, 16],
            feature_dim: 4,
            activation: Activation::Tanh,
            diagonal_covariance: false,
        },
        schedule: PlSchedule::linear(4, 120, 20),
        ..ExperimentConfig::default()
    };
    cfg.train.optimizer.learning_rate = 3e-3;
    cfg.train.sgld.step_size = 1e-3;
    cfg.train.sgld.noise_variance = 1e-3;
    cfg.train.sgld.grad_clip = None;
    cfg
}

/// Grid of confidences `j/12`, which contains every edge `m/M` for `M ≤ 4`.
pub fn confidence_grid() -> Vec<f64> {
    (1..=12).map(|j| j as f64 / 12.0).collect()
}

/// Compares `ece` against [`brute_force_ece`] on every ordered record
/// sequence of length ≤ 3 over the grid × {correct, wrong}, and on every
/// correctness pattern for lengths 4..=12 at spread-out grid confidences,
/// for each `M` in 1..=4. Returns `(cases, mismatches)`.
pub fn exhaustive_ece_check() -> (usize, usize) {
    let grid = confidence_grid();
    let atoms: Vec<PredictionRecord> = grid
        .iter()
        .flat_map(|&c| {
            [
                PredictionRecord::new(0, 0, c),
                PredictionRecord::new(0, 1, c),
            ]
        })
        .collect();
    let mut sets: Vec<Vec<PredictionRecord>> = vec![Vec::new()];
    let mut all = Vec::new();
    for _ in 0..3 {
        sets = sets
            .iter()
            .flat_map(|s| {
                atoms.iter().map(move |a| {
                    let mut t = s.clone();
                    t.push(*a);
                    t
                })
            })
            .collect();
        all.extend(sets.iter().cloned());
    }
    for n in 4..=12usize {
        let confs: Vec<f64> = (0..n).map(|i| grid[(i * 5) % 12]).collect();
        for pattern in 0u32..(1 << n) {
            all.push(
                (0..n)
                    .map(|i| PredictionRecord::new(0, ((pattern >> i) & 1) as usize, confs[i]))
                    .collect(),
            );
        }
    }
    let mut cases = 0;
    let mut mismatches = 0;
    for records in &all {
        for m in 1..=4 {
            cases += 1;
            let got = ebpl_core::metrics::ece(records, m).unwrap().ece;
            if got != brute_force_ece(records, m) {
                mismatches += 1;
            }
        }
    }
    (cases, mismatches)
}
