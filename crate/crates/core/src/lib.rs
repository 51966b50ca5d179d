//! Band-order-aware hyperspectral + LiDAR fusion classification.
//!
//! The crate covers the whole experiment loop: scene I/O and synthetic
//! scenes, band orderings with LiDAR pseudo-bands, a small tape-based
//! autodiff core, the dual-stream network, Adam training, and OA / AA /
//! Kappa evaluation.

pub mod band_order;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hslinet;
pub mod manifest;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
