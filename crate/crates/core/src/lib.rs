//! Gaussian neural processes for 1-D regression.
//!
//! Conditional neural process models that output a correlated multivariate
//! Gaussian over the target outputs, with mean-field, `linear` (low-rank)
//! and `kvv` covariance heads on top of DeepSet, attentive and
//! convolutional encoders. Includes an exact GP oracle, a synthetic task
//! generator, a maximum-likelihood trainer and evaluation tools.

// Negated comparisons deliberately treat NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod heads;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::{Corpus, Dataset, TaskSpec};
pub use error::{Error, Result};
pub use heads::{Covariance, GaussianPredictive, HeadKind};
pub use kernels::KernelSpec;
pub use model::{EncoderKind, Model, ModelSpec};
pub use nn::ParameterStore;
pub use tensor::Tensor;
pub use train::{train, TrainConfig};
