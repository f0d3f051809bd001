//! Dataset handling, configuration and the stages behind the `ccad`
//! command-line tool.

pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod synth;

pub use config::RunConfig;
pub use error::{PipelineError, Result};
