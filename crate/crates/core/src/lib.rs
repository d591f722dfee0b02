//! Information-bottleneck gradient (IBG) attributions for aspect-level
//! sentiment classification.
//!
//! The crate bundles a small reverse-mode autodiff engine, a classifier with
//! an optional stochastic bottleneck layer, two-phase training, gradient
//! attribution methods (simple gradient, SmoothGrad, integrated gradients and
//! the blended IBG score), faithfulness metrics (AOPC, post-hoc accuracy,
//! opinion-word recovery) and per-dimension importance analyses.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod dimension_analysis;
pub mod error;
pub mod exec;
pub mod faithfulness;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
