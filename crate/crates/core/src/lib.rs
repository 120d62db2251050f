//! Spatial-perception state-space anomaly detection.
//!
//! Pipeline: a three-scale convolutional encoder whose features are fused by
//! a half feature pyramid, a bank of learnable prototypes matched with a
//! sliding window, a hierarchical decoder of state-space blocks scanning in
//! Circular-Hilbert order, and a four-part anomaly score over the resulting
//! reconstruction-error map.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prototype;
pub mod real;
pub mod rng;
pub mod scan_orders;
pub mod scoring;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
