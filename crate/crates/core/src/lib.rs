//! Rationale-based debiasing for text classifiers.
//!
//! A bias extractor/predictor pair is trained first and frozen; a task
//! extractor/predictor pair is then trained with a penalty that couples
//! task energies to bias energies. At inference time, natural-language
//! feedback is parsed into per-token labels, turned into bias
//! probabilities, smoothed with the model's own, and overlaid on the task
//! energies before re-predicting.

pub mod corpus;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod feedback;
pub mod model;
pub mod rationale;
pub mod registry;
pub mod training;

pub use error::{Error, Result};
