//! Spherical modeling of the valence/arousal/dominance emotion space.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`geometry`]: scale normalization, spherical decomposition and angular
//!   region labels for VAD annotations;
//! - [`losses`]: weighted cross-entropy over regions, concordance-correlation
//!   regression loss, and the decaying combination schedule;
//! - [`nn`]: a small differentiable pooling network with analytic backward
//!   passes and binary checkpoints;
//! - [`gradcheck`]: finite-difference verification for every gradient;
//! - [`data`]: manifest and feature-file handling plus a synthetic dataset
//!   generator;
//! - [`metrics`]: dataset-level CCC, macro F1 and accuracy reports;
//! - [`trainer`]: a deterministic AdamW training loop with best-checkpoint
//!   selection and ablation switches.

pub mod data;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod trainer;
