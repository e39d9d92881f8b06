//! Emotion-acoustic inconsistency modeling for audio deepfake detection.
//!
//! The pipeline consumes precomputed frame-level emotion and acoustic
//! features ([`FeatureBundle`]) and:
//!
//! 1. aligns the two streams with discrepancy-driven dual-head weights ([`eaam`]),
//! 2. builds a frame-level temporal attention graph and a two-stage
//!    heterogeneous graph over emotion, utterance and acoustic nodes ([`eaimm`]),
//! 3. trains the classifier jointly with a contrastive emotional-variation
//!    loss under homoscedastic uncertainty weighting ([`model`], [`train`]),
//! 4. reports EER and min t-DCF ([`metrics`]).
//!
//! Every gradient comes from the reverse-mode tape in [`autodiff`] and is
//! checked against central finite differences in [`gradcheck`].

pub mod autodiff;
pub mod checkpoint;
pub mod eaam;
pub mod eaimm;
pub mod error;
pub mod feature_store;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod model;
mod params;
pub mod synthgen;
pub mod train;

pub use eaimm::EvalConfig;
pub use error::{Error, Result};
pub use feature_store::{FeatureBundle, Label};
pub use matrix::Matrix;
pub use model::{Ablation, Model, ModelConfig};
pub use train::TrainConfig;
