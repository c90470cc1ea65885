//! Uncertainty signals, decay-law fitting, knowledge regions, decision and
//! calibration metrics, and entropy-calibrated GRPO on toy policies.

pub mod cli;
pub mod config;
pub mod decay;
pub mod error;
pub mod grpo;
pub mod io;
pub mod metrics;
pub mod regions;
pub mod signals;
pub mod synthetic;

pub use error::{Error, Result};
