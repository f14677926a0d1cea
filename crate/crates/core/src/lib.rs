//! Diabetic retinopathy grading pipeline.
//!
//! Fundus images are normalized ([`preprocess`]), labels are turned into
//! cumulative ordinal targets and class-balanced ([`labels`]), two CNN branch
//! models are trained and stacked under a dense meta-model ([`model`]), and the
//! result is scored with a confusion-matrix based metric suite ([`metrics`]).
//! [`pipeline`] wires the stages together and backs the `drgrade` CLI.

pub mod dataset;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod shapecalc;

pub use error::{Error, Result};
