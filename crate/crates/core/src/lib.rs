//! Topic-level misclassification profiling for binary text classifiers.
//!
//! The pipeline trains a classifier on a multiview TF-IDF/structural feature
//! space, explains every message with SHAP, clusters the top-ranked
//! attributions into NMF topics, builds topic profiles of reliably classified
//! messages, and scores each message by its Jensen-Shannon divergence from the
//! profile matching its predicted label. The score works as a stand-alone
//! misclassification detector and as a repair layer over output-probability
//! uncertainty detectors.

pub mod attribution;
pub mod classifiers;
pub mod corpus;
pub mod error;
pub mod features;
pub mod pipeline;
pub mod profiling;
pub mod scoring;
pub mod sparse;
pub mod uncertainty;

pub use error::{Error, Result};
