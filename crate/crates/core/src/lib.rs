//! Multimodal physiological decoding of driving behaviour.
//!
//! The crate covers the whole offline pipeline: event-locked epoch storage,
//! filtering and spectral estimation, the 503-column feature space, a
//! from-scratch multiclass gradient-boosted tree learner with two growth
//! strategies, exact TreeSHAP attribution and elite feature selection, a
//! tree-structured Parzen estimator for hyperparameter search, weighted
//! soft voting, and evaluation with modality ablation.

pub mod dataset;
pub mod dsp;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod features;
pub mod gbdt;
pub mod matrix;
pub mod pipeline;
pub mod shapx;
pub mod tpe;

pub use dataset::{BehaviorClass, DatasetSplit, Epoch, Modality, ModalityLayout};
pub use error::{Error, Result};
pub use matrix::DenseMatrix;
