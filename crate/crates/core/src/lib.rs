//! Federated adaptive estimation of a target-population average treatment
//! effect from one target site and several source sites that share only
//! low-dimensional summaries.
//!
//! Estimation code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod data;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod nuisance;
pub mod pipeline;
pub mod scalar;
pub mod simulate;
pub mod site;
pub mod source;
pub mod summary;
pub mod target;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{FaceError, Result};
pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type SiteData = data::SiteData<f64>;
pub type TargetSummary = summary::TargetSummary<f64>;
pub type SourceSummary = summary::SourceSummary<f64>;
pub type TargetPool = summary::TargetPool<f64>;
pub type AggregationResult = aggregate::AggregationResult<f64>;
pub type PipelineConfig = pipeline::PipelineConfig<f64>;
