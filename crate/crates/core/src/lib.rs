//! Adaptive feature-level ensembling of compact CNN weak learners.
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod complexity;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
