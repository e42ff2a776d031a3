//! Deterministic simulator and algorithm library for Byzantine-robust
//! federated learning.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: vectors, covariance, power iteration, medians, normal quantiles
//! - [`model`]: small feedforward classifiers with exact backprop and SGD
//! - [`aggregation`]: server-side aggregation rules and the spectral prediction filter
//! - [`attacks`]: omniscient-adversary update crafting
//! - [`federation`]: the parameter-averaging and prediction-sharing protocols
//! - [`experiments`]: configuration, synthetic data, robustness sweeps, result files

pub mod numerics;
pub mod model;
pub mod rng;
pub mod aggregation;
pub mod attacks;
pub mod federation;
pub mod experiments;
