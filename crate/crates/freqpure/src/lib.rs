//! Frequency-domain adversarial attacks and diffusion-based purification on
//! image batches.
//!
//! The crate covers one full experimental loop:
//!
//! 1. [`spectral`] — per-channel 2-D DFT decomposition of a batch into
//!    magnitude and phase, plus the symmetry projection that keeps perturbed
//!    spectra real-valued and radial log-energy histograms for analysis.
//! 2. [`attack`] — gradient attacks that perturb pixels, spectral magnitude,
//!    spectral phase, or combinations, optimized with Adam against any
//!    [`attack::Classifier`].
//! 3. [`diffusion`] — a variance-preserving forward noising process and its
//!    reverse-time denoiser, composed into [`diffusion::purify`] which
//!    pushes a (possibly attacked) batch through partial diffusion to strip
//!    adversarial structure.
//! 4. [`models`] — a synthetic dataset plus small trained-from-scratch
//!    classifier and score networks, built on the hand-rolled kernels in
//!    [`nn`].
//! 5. [`bench`] — the evaluation sweep over attack modes and diffusion
//!    stopping times, with deterministic machine-readable reports.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the `*F32`/`*F64` aliases at the crate root pick a precision.

pub mod attack;
pub mod bench;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod io;
pub mod models;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod spectral;

pub use attack::{
    apply_perturbations, attack_loss, run_attack, AttackConfig, AttackMode, AttackOutcome,
    AttackTrace, Classifier, PerturbationSet, TraceRow,
};
pub use diffusion::{
    forward_diffuse, purify, purify_traced, reverse_denoise, AnalyticGaussianScore,
    DiffusionSchedule, PurifyConfig, PurifySnapshots, ScoreModel,
};
pub use bench::{
    render_table, run_sweep, subset_indices, BenchComponents, CellRunRecord, EvalPlan,
    EvalReport, Metric, SummaryRow,
};
pub use error::{Error, Result};
pub use image::{ImageBatch, RangeTag};
pub use models::{
    generate_toy_dataset, load_external_classifier, load_external_score, train_toy_classifier,
    train_toy_score_model, LabeledBatch, ToyCnn, ToyDataset, ToyDatasetSpec, ToyUnet,
    TrainedScore,
};
pub use scalar::Scalar;
pub use spectral::{
    decompose, perturbation_spectrum, radial_spectrum, recompose, symmetrize,
    SpectralDecomposition, SpectrumHistogram,
};

/// Single-precision image batch.
pub type ImageBatchF32 = image::ImageBatch<f32>;
/// Double-precision image batch.
pub type ImageBatchF64 = image::ImageBatch<f64>;
/// Single-precision magnitude/phase split.
pub type SpectralDecompositionF32 = spectral::SpectralDecomposition<f32>;
/// Double-precision magnitude/phase split.
pub type SpectralDecompositionF64 = spectral::SpectralDecomposition<f64>;
/// Single-precision perturbation tensors.
pub type PerturbationSetF32 = attack::PerturbationSet<f32>;
/// Double-precision perturbation tensors.
pub type PerturbationSetF64 = attack::PerturbationSet<f64>;
/// Single-precision attack result.
pub type AttackOutcomeF32 = attack::AttackOutcome<f32>;
/// Double-precision attack result.
pub type AttackOutcomeF64 = attack::AttackOutcome<f64>;
/// Single-precision toy classifier.
pub type ToyCnnF32 = models::ToyCnn<f32>;
/// Double-precision toy classifier.
pub type ToyCnnF64 = models::ToyCnn<f64>;
/// Single-precision noise-prediction network.
pub type ToyUnetF32 = models::ToyUnet<f32>;
/// Double-precision noise-prediction network.
pub type ToyUnetF64 = models::ToyUnet<f64>;
/// Single-precision trained score model.
pub type TrainedScoreF32 = models::TrainedScore<f32>;
/// Double-precision trained score model.
pub type TrainedScoreF64 = models::TrainedScore<f64>;
