//! Missing-modality adaptation for multimodal sentiment regression.
//!
//! The crate implements the full ProMMA pipeline on top of a small
//! deterministic reverse-mode tensor engine: a MULT-style backbone, a missing
//! modality evaluator that gates generation, cross-modal feature generation
//! with decoupled soft prompts, mutual-information prompt weighting, and a
//! multi-level prompt connection stage — plus the missingness simulator,
//! LB/MS/MD baselines, metrics, and the experiment harness.

pub mod backbone;
pub mod config;
pub mod checkpoint;
pub mod dataset;
pub mod dpw;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod mipd;
pub mod missing;
pub mod mme;
pub mod mpdc;
pub mod nn;
pub mod pipeline;
pub mod optim;
pub mod promma;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
