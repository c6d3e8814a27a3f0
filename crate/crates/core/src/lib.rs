//! Incremental per-entity Bayesian logistic random effects on top of a
//! stationary fixed-effect model, with the batch trainer, a simulated
//! nearline stream pipeline and an offline evaluation harness.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod incremental;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod sampler;
pub mod stream;

pub use error::{Error, Result};
pub use incremental::{incremental_update, posterior_covariance, Covariance, IncrementalUpdateResult};
pub use loss::OffsetInstance;
pub use model::{
    CoefficientState, GameModel, HessianMode, HessianStore, Instance, LinearFixedEffect, ReAssignment, ReKey, Schema,
    ScoreSource, SparseVector, TrainerConfig,
};
