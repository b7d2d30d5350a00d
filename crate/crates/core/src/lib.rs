//! Training objectives for video-language alignment with synthetic videos.
//!
//! A synthetic video generated from a negative caption is only useful when it
//! actually depicts that caption. This crate scores each synthetic video with a
//! frozen frame-level ensemble, turns the score gap into a per-sample weight,
//! and trains an alignment model under a weighted loss plus a margin loss that
//! anchors on the longest common subsequence of the two captions.
//!
//! Modules, bottom-up:
//!
//! * [`corpus`]: triplets, synthetic manifests, feature files, toy corpus generator.
//! * [`captions`]: tokenization and LCS masks.
//! * [`scoring`]: frame scorers, the score cache, weighting strategies.
//! * [`model`]: the alignment-model contract and a bilinear surrogate.
//! * [`objective`]: the loss terms and the training loop.
//! * [`eval`]: AUC, retrieval mAP, VQA accuracy, misalignment analysis.
//! * [`pipeline`]: staged runs and ablation sweeps driven by one JSON config.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! pin the common `f64` instantiations.

pub mod captions;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod scalar;
pub mod scoring;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Surrogate model in double precision.
pub type Model = model::SurrogateModel<f64>;
/// Surrogate model in single precision.
pub type Model32 = model::SurrogateModel<f32>;
/// Prepared training sample in double precision.
pub type Sample = objective::PreparedSample<f64>;
/// Loss report in double precision.
pub type Report = objective::LossReport<f64>;
