//! Siamese patch-transformer for multivariate time-series representation
//! learning, with masked pre-training, frozen-backbone forecasting heads,
//! linear and ridge baselines, and the experiment drivers built on them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod heads;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
