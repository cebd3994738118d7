//! Facial-expression recognition trained from candidate label sets.
//!
//! A ViT-style encoder is optionally pre-trained by regressing HOG
//! descriptors of masked patches, then fine-tuned with one learnable query
//! per class. Per-sample label confidences start uniform over each candidate
//! set and are revised during training from the model's confidence response.

pub mod candidate_store;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod hog;
pub mod mim;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
