//! Siamese verifier models, checkpoints, and the pretraining and
//! finetuning loops for masked-probe face verification.

pub mod backbone;
pub mod checkpoint;
pub mod error;
mod layers;
pub mod params;
pub mod preprocess;
pub mod scorer;
pub mod training;
pub mod verifier;

pub use backbone::{Architecture, BackboneSpec};
pub use error::{ModelError, Result};
pub use scorer::{ensemble_scorer, ImageStore, ModelScorer};
pub use verifier::{distance_to_similarity, EnsembleModel, Lineage, VerifierModel, VerifierSpec};
