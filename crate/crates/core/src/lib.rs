//! Language-bias laboratory: a tiny vision-conditioned sequence model, the
//! reward/bias diagnostics, bias-regularised instruction tuning and
//! bias-penalised preference optimisation, plus object-hallucination metrics
//! on a synthetic corpus.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod record;
pub mod refcache;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model used for training.
pub type Model32 = model::Model<f32>;
/// Double-precision model used for gradient checks.
pub type Model64 = model::Model<f64>;
