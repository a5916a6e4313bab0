use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DiffError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    LeakyRelu {
        slope: f64,
    },
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu { slope } => tape.leaky_relu(x, slope),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "leaky-relu" | "leaky_relu" => Ok(Activation::LeakyRelu { slope: 0.01 }),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Feature extractor `f(x)`: dense layers with an activation after every
/// hidden layer and a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpExtractor {
    pub layers: Vec<DenseLayer>,
    pub activations: Vec<Activation>,
    pub input_dim: usize,
    pub feature_dim: usize,
}

/// Tape handles for one extractor's parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl MlpExtractor {
    /// He-style initialization, weights ~ N(0, 2/fan_in), zero biases.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                DenseLayer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        MlpExtractor {
            layers,
            activations: vec![activation; hidden.len()],
            input_dim,
            feature_dim,
        }
    }

    /// Single linear layer with identity weight: `f(x) = x`.
    pub fn identity(dim: usize) -> Self {
        MlpExtractor {
            layers: vec![DenseLayer {
                weight: Tensor::identity(dim),
                bias: Tensor::zeros(&[dim]),
            }],
            activations: Vec::new(),
            input_dim: dim,
            feature_dim: dim,
        }
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.bias.len())
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone().with_grad(trainable)),
                    tape.leaf(l.bias.clone().with_grad(trainable)),
                )
            })
            .collect();
        BoundMlp { layers }
    }

    /// Applies the network to a batch `x` of shape `[n, input_dim]`.
    pub fn apply(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if i < last {
                h = self.activations[i].apply(tape, h);
            }
        }
        Ok(h)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor, DiffError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.apply(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }
}
