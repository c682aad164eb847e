//! Scenario-specific variational embedding learning for multi-scenario CTR
//! prediction: user and item posteriors regularized toward global-knowledge
//! priors, with a from-scratch differentiable kernel, synthetic data
//! generation, ranking metrics, and a training/evaluation CLI.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod priors;
pub mod quantize;
