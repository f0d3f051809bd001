use serde::{Deserialize, Serialize};

use super::optim::{OptimizerConfig, OptimizerKind};
use crate::backbone::Variant;
use crate::error::{Error, Result};
use crate::schedules::{BetaKind, GuidanceConfig, NoiseSchedule};

/// Where the batch features fed to the fine compression module come from
/// when reconstructing a test image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BatchFeatureSource {
    /// Features of the test image itself.
    #[default]
    TestImage,
    /// Features of the first training batch (ablation).
    TrainingBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Number of diffusion steps `T`.
    #[serde(alias = "T")]
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub eta: f64,
    /// Target guidance weight (pixel-space variant only).
    pub guidance_w: f64,
    pub inference_steps: usize,
    #[serde(default)]
    pub batch_features: BatchFeatureSource,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    /// Defaults per variant: the latent variants use AdamW, batch 12 and a
    /// small learning rate; the pixel variant uses Adam, batch 32, lr 3e-4.
    pub fn new(variant: Variant) -> Self {
        let (batch_size, learning_rate, optimizer) = match variant {
            Variant::V => (32, 3e-4, OptimizerKind::Adam),
            Variant::F | Variant::C => (12, 1e-4, OptimizerKind::AdamW),
        };
        Self {
            variant,
            epochs: 100,
            max_steps: None,
            batch_size,
            learning_rate,
            weight_decay: 0.05,
            optimizer,
            clip_norm: default_clip(),
            seed: 0,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            eta: 0.0,
            guidance_w: 2.0,
            inference_steps: 10,
            batch_features: BatchFeatureSource::TestImage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::param("epochs", "must be >= 1"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::param("max_steps", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::param("learning_rate", "must be finite and non-negative"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::param("weight_decay", "must be finite and non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::param("clip_norm", "must be positive"));
            }
        }
        if self.inference_steps == 0 || self.inference_steps > self.diffusion_steps {
            return Err(Error::param(
                "inference_steps",
                format!("must lie in [1, {}]", self.diffusion_steps),
            ));
        }
        self.guidance()?;
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::make(self.diffusion_steps, self.beta_start, self.beta_end, BetaKind::Linear)?.with_eta(self.eta)
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        GuidanceConfig::new(self.guidance_w)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let mut c = OptimizerConfig::new(self.optimizer, self.learning_rate, self.weight_decay);
        c.clip_norm = self.clip_norm;
        c
    }

    /// Total optimisation steps for a dataset of `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n.div_ceil(self.batch_size.min(n.max(1))))
    }
}
