//! Dense tensors and reverse-mode differentiation over a dynamic tape.
//!
//! All training math in the crate (classifier logits, Gaussian energies,
//! the joint loss and SGLD input gradients) is built from the operations on
//! [`Tape`]. Values are `f64` throughout.

mod mlp;
mod tape;
mod tensor;

use thiserror::Error;

pub use mlp::{Activation, BoundMlp, DenseLayer, MlpExtractor};
pub(crate) use tape::softplus;
pub use tape::{backward, forward, grad_wrt_input, logsumexp, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("seed shape {got:?} does not match output shape {expected:?}")]
    SeedShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: expected a scalar output, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },
    #[error("tape has no recorded output")]
    NoOutput,
}
