//! Core library for invariant information bottleneck experiments.
//!
//! - [`graph`]: define-by-run reverse-mode differentiation over dense tensors.
//! - [`envgen`]: procedural multi-environment datasets with spurious,
//!   pseudo-invariant and geometrically skewed features.
//! - [`models`]: stochastic encoder, invariant predictor and domain-aware
//!   predictor.
//! - [`objectives`]: loss kernels and the composite objectives of every method.
//! - [`trainer`]: the alternating min-max loop and model selection.
//! - [`oracles`]: brute-force verifiers for mutual information, KL and the
//!   failure-mode constructions.

pub mod envgen;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod objectives;
pub mod oracles;
pub mod optim;
pub mod params;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamGrads, ParamGroup, ParamId, ParameterSet};
pub use tensor::Tensor;
