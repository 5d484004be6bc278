//! Zero-shot detection of sampled text from local-normalization statistics.
//!
//! Temperature, top-k and nucleus sampling renormalize every next-token
//! distribution separately. The per-step normalizers leave a trace that a
//! scoring model can measure: TempNorm (`ε_τ`) for temperature sampling and
//! top-k set mass (`ε_k`) for top-k sampling. This crate computes those
//! statistics alongside the usual likelihood, rank and entropy baselines,
//! the closed-form posteriors that justify them, and an evaluation harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the `*64` aliases
//! below fix the scalar to `f64`, which is what the file formats and CLI use.

pub mod backends;
pub mod bayes;
pub mod dataset;
pub mod decode;
pub mod dist;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lm;
pub mod oracle;
pub mod scalar;
pub mod scan;
pub mod stats;

pub use dataset::{Label, SequenceRecord};
pub use decode::DecodingStrategy;
pub use dist::{CondDist, TokenId, Vocabulary};
pub use error::{Error, Result};
pub use lm::ToyLm;
pub use scalar::Scalar;
pub use stats::{ScoreParams, SequenceScore, TokenScore};

pub type CondDist64 = dist::CondDist<f64>;
pub type CondDist32 = dist::CondDist<f32>;
pub type ToyLm64 = lm::ToyLm<f64>;
pub type ToyLm32 = lm::ToyLm<f32>;
pub type TokenScore64 = stats::TokenScore<f64>;
pub type SequenceScore64 = stats::SequenceScore<f64>;
pub type ScoreParams64 = stats::ScoreParams<f64>;
pub type ExactSeqDist64 = decode::ExactSeqDist<f64>;
pub type LogprobMatrix64 = backends::LogprobMatrix<f64>;
pub type EvalReport64 = eval::EvalReport<f64>;
