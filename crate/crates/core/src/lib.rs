//! Drift detection for model serving when labels arrive late.
//!
//! Six per-batch signals (delayed-KPI moving average, prediction
//! uncertainty, Hellinger distance, autoencoder reconstruction error, SPN
//! likelihood and natural-gradient norm) each feed a statistical-control
//! detector; a tailored majority vote decides when to retrain, and the
//! detectors' warning zones decide which batches to retrain on.

pub mod cli;
pub mod control;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod serving;
pub mod signals;
pub mod stream;

pub use error::{Error, Result};
