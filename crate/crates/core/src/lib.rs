//! Latent factor models for predicting post-read action rates.
//!
//! The crate covers the full experimental pipeline for per-(user, item,
//! action-type) response prediction:
//!
//! * [`data`]: event and feature files, query grouping and the
//!   train/tune/test split protocol.
//! * [`model`]: factor containers, the locally augmented tensor score and its
//!   special cases (BST, SMF, CMF), cold-start fallbacks and the binary model
//!   file format.
//! * [`train`]: Monte-Carlo EM with a systematic-scan Gibbs sampler.
//! * [`baselines`]: the bilinear feature regression and the COS / LM / BM25
//!   retrieval baselines.
//! * [`eval`]: P@k, MAP, lift, paired t-tests, precision-recall curves and
//!   breakdowns.
//! * [`analysis`]: aggregate exploratory statistics over action counts.
//! * [`synth`]: datasets drawn from the generative model with known truth.

pub mod analysis;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
mod linalg;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use data::{Dataset, Event, FeatureVector, LabelKind, QueryGroup, SplitSpec};
pub use error::{Error, Result};
pub use model::{FactorState, FittedModel, ModelConfig, ModelKind, Presence, PriorParams};
pub use train::{fit, FitOutput, TrainOptions};
