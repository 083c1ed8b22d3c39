//! Transformer-based congestion-control selection trained on simulated
//! network telemetry.

pub mod config;
pub mod control;
pub mod error;
pub mod model;
pub mod report;
pub mod simnet;
pub mod telemetry;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
