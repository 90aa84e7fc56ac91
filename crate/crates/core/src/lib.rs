//! Data-free continual knowledge transfer between place-recognition robots.
//!
//! A student robot absorbs black-box teacher classifiers by querying them
//! ([`sampler`]) and retraining on the reconstructed pseudo-samples
//! ([`ccl`]). Separately, robots can share exact additive summaries of what
//! they have seen and solve a closed-form classifier from the merged result
//! ([`dsi`]).

pub mod ccl;
pub mod continual;
pub mod dsi;
mod error;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod partition;
pub mod sampler;
pub mod seed;
pub mod synthgen;
mod types;

pub use error::{Error, Result};
pub use types::{
    argmax, l1_normalize, shannon_entropy, top1, ClassId, CostLedger, Dataset, FeatureVector, LabeledSample,
    PlaceClassSet, PredictionDistribution, PseudoSample, DISTRIBUTION_TOLERANCE,
};
