//! Data side of masked-probe face verification: synthetic masking, dataset
//! manifests and splits, pair sampling, and biometric error metrics.

pub mod geometry;
pub mod registry;
pub mod rng;
pub mod synth;
pub mod metrics;
pub mod pairs;
pub mod report;
pub mod scoring;
