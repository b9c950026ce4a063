//! Trainable desk-scale models: a synthetic labeled image dataset, a small
//! convolutional classifier, a small U-Net score network, and a manifest
//! loader that wraps externally supplied weights behind the same interfaces.
//!
//! Everything here trains in minutes on a CPU; the classifier implements
//! [`crate::attack::Classifier`] and the score network implements
//! [`crate::diffusion::ScoreModel`], so the full attack → purify → evaluate
//! pipeline runs end to end without external assets.

mod classifier;
mod dataset;
mod manifest;
mod score;

pub use classifier::{train_classifier_on, train_toy_classifier, ClassifierTraining, ToyCnn};
pub use dataset::{generate_toy_dataset, LabeledBatch, ToyDataset, ToyDatasetSpec};
pub use manifest::{
    load_external_classifier, load_external_score, ModelManifest, NormalizedClassifier,
};
pub use score::{
    train_score_on, train_toy_score_model, ScoreTraining, ToyUnet, TrainedScore,
};
