//! Objectives, the training loop, reconstruction samplers and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod optim;
pub mod reconstruct;
pub mod trainer;

pub use config::{BatchFeatureSource, TrainConfig};
pub use losses::{loss_base, loss_ccad_c, loss_ccad_f, loss_ccad_v};
pub use reconstruct::{reconstruct_fc, reconstruct_v, sample_fc, sample_v};
pub use trainer::{train, CcadModel, FcmModule, ModelSpec, TrainState};
