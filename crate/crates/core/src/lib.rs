//! Compressed-global-feature-conditioned diffusion for image anomaly
//! detection.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod feature_bank;
pub mod fine_compression;
pub mod nn;
pub mod schedules;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
