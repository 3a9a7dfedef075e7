//! Adversarial compensation of short-utterance speaker embeddings.
//!
//! A conditional Wasserstein GAN maps an unreliable short-utterance i-vector
//! (plus noise) to an estimate of the long-utterance vector of the same
//! session. The generator is trained on the critic signal, a cosine-distance
//! term and an auxiliary speaker-classification term. Transformed vectors are
//! scored with a two-covariance PLDA back-end and evaluated with EER/minDCF.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the double-precision variants used by the pipeline.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod gan;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod plda;
pub mod scalar;
pub mod synth;
pub mod vecspace;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type IVector64 = vecspace::IVector<f64>;
pub type Mlp64 = nn::Mlp<f64>;
pub type Mlp32 = nn::Mlp<f32>;
pub type Corpus64 = synth::Corpus<f64>;
pub type PldaModel64 = plda::PldaModel<f64>;
