//! Pixel-weighted cross-entropy for semantic segmentation.
//!
//! Each pixel's loss is scaled by an inverse-frequency weight of its class
//! times a boundary-uncertainty factor `1 - exp(-d^2 / (2 sigma^2))`, where
//! `d` is the exact Euclidean distance to the nearest label boundary. The
//! crate also ships everything needed to test that idea end to end on a
//! desk: a synthetic scene generator, a small convolutional model with
//! hand-written backpropagation, SGD training, metrics and the `segweight`
//! command-line tool.

pub mod dataset;
pub mod edt;
pub mod error;
pub mod experiment;
pub mod imagery;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod synth;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
