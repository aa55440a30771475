//! Hierarchical classification over precomputed feature vectors.
//!
//! The crate trains one linear head per taxonomy level on top of a shared,
//! frozen representation. A transitional masking layer couples adjacent
//! levels at inference and training time: the probability the parent level
//! assigns to each class is pushed down through the taxonomy's transition
//! matrix and multiplied into the child level's logits before the softmax.
//! A dynamic reweighting scheme counters group bias by scaling each
//! instance's per-level loss with the inverse frequency of its
//! (group, predicted class) cell.
//!
//! Modules:
//! - [`taxonomy`]: class hierarchy, parsing, transition matrices
//! - [`data`]: datasets, file formats, splits, synthetic generation
//! - [`ttc`]: model parameters, masked forward pass, checkpoints
//! - [`fairness`]: group vocabulary and dynamic loss weights
//! - [`trainer`]: losses, analytic gradients, SGD training loop
//! - [`metrics`]: hierarchical F1, consistency, exact match, equalized odds

pub mod data;
pub mod error;
pub mod fairness;
pub mod metrics;
pub mod taxonomy;
pub mod trainer;
pub mod ttc;

pub use error::{Error, Result};
