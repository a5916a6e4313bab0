//! Energy-based pseudo-labeling for semi-supervised classification.
//!
//! A softmax classifier and a Gaussian-energy EBM share one feature
//! extractor and are trained jointly; unlabeled data feed the EBM's
//! likelihood term, and a curriculum assigns soft pseudo-labels to the most
//! confident unlabeled samples in growing fractions.
//!
//! Modules, bottom-up:
//! - [`diffcore`]: tensors and reverse-mode differentiation
//! - [`hybrid_model`]: classifier head, EBM head, tying penalty
//! - [`ebm_train`]: joint loss, SGLD sampler, replay buffer, Adam
//! - [`curriculum`]: pseudo-label selection and the full training run
//! - [`metrics`]: accuracy, macro F-score, ECE, reliability diagrams
//! - [`data`]: generators, IDX/CSV loaders, semi-supervised splits
//! - [`experiment`]: method presets, run artifacts and aggregation

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curriculum;
pub mod data;
pub mod diffcore;
pub mod ebm_train;
pub mod experiment;
pub mod hybrid_model;
pub mod metrics;
