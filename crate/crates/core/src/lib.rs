//! Volumetric multiple-instance learning toolkit.
//!
//! Builds and trains 2.5D and 3D progression classifiers over volumetric
//! slice stacks: a shared 2D encoder with BiLSTM or transformer aggregation,
//! an inflated 3D CNN, and a factorized self-attention transformer. Includes
//! a time-aware non-contrastive pretraining stage, a synthetic longitudinal
//! cohort generator with planted slice-level biomarkers, and a stratified
//! cross-validation harness with exact ranking metrics.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod models;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};
