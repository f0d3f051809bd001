//! Flat run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use ccad::backbone::{CodecMode, Variant};
use ccad::feature_bank::{CoresetInit, ExtractorConfig, ExtractorKind};
use ccad::training::optim::OptimizerKind;
use ccad::training::{BatchFeatureSource, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::DEFAULT_MASK_PATTERN;
use crate::error::{PipelineError, Result};
use crate::synth::{Defect, SynthSpec, Texture};

/// Every tunable of the pipeline under one flat key namespace.
///
/// Optional training keys left unset take the variant's default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // locations
    pub data_root: PathBuf,
    pub work_dir: PathBuf,
    pub category: Option<String>,
    pub mask_pattern: String,
    pub image_size: usize,

    // synthetic data
    pub synth_seed: u64,
    pub synth_category: String,
    pub synth_n_train: usize,
    pub synth_n_test_good: usize,
    pub synth_n_test_defect: usize,
    pub synth_texture: Texture,
    pub synth_defect: Defect,
    pub synth_intensity: f64,

    // feature extractor and coarse bank
    pub extractor_seed: u64,
    pub extractor_widths: Vec<usize>,
    pub extractor_layers: Vec<usize>,
    pub feature_dim: usize,
    pub patch_stride: usize,
    /// Rows kept by coreset selection; 0 builds an empty bank.
    pub bank_size: usize,
    /// First coreset row; unset picks the largest-norm row.
    pub coreset_first: Option<usize>,

    // fine compression
    pub fcm_inner: usize,
    pub fcm_heads: usize,
    pub fcm_seed: u64,

    // denoiser
    pub variant: Variant,
    pub base_width: usize,
    pub channel_mult: Vec<usize>,
    pub attention_levels: usize,
    pub heads: usize,
    pub groups: usize,
    pub cond_inner: usize,
    pub zero_init_cond: bool,
    pub model_seed: u64,

    // latent codec (F/C)
    pub codec_latent_channels: usize,
    pub codec_hidden: usize,
    pub codec_steps: usize,
    pub codec_batch_size: usize,
    pub codec_lr: f64,
    pub codec_mae_threshold: f64,
    pub codec_seed: u64,

    // training
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub optimizer: Option<OptimizerKind>,
    pub clip_norm: Option<f64>,
    pub train_seed: u64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    // reconstruction
    pub eta: f64,
    pub guidance_w: f64,
    pub inference_steps: usize,
    pub batch_features: BatchFeatureSource,
    pub inference_seed: u64,
    pub eval_batch_size: usize,

    // scoring
    pub score_layers: Vec<usize>,
    pub score_weights: Vec<f64>,
    pub smooth_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            data_root: "data".into(),
            work_dir: "run".into(),
            category: None,
            mask_pattern: DEFAULT_MASK_PATTERN.into(),
            image_size: 32,

            synth_seed: synth.seed,
            synth_category: synth.category,
            synth_n_train: synth.n_train,
            synth_n_test_good: synth.n_test_good,
            synth_n_test_defect: synth.n_test_defect,
            synth_texture: synth.texture,
            synth_defect: synth.defect,
            synth_intensity: synth.defect_intensity,

            extractor_seed: 7,
            extractor_widths: vec![16, 32, 64],
            extractor_layers: vec![0, 1],
            feature_dim: 48,
            patch_stride: 4,
            bank_size: 64,
            coreset_first: None,

            fcm_inner: 64,
            fcm_heads: 4,
            fcm_seed: 0,

            variant: Variant::V,
            base_width: 16,
            channel_mult: vec![1, 2, 2],
            attention_levels: 1,
            heads: 4,
            groups: 8,
            cond_inner: 32,
            zero_init_cond: true,
            model_seed: 0,

            codec_latent_channels: 4,
            codec_hidden: 16,
            codec_steps: 1000,
            codec_batch_size: 8,
            codec_lr: 4e-3,
            codec_mae_threshold: 0.05,
            codec_seed: 0,

            epochs: 100,
            max_steps: Some(2000),
            batch_size: 8,
            learning_rate: None,
            weight_decay: 0.05,
            optimizer: None,
            clip_norm: Some(1.0),
            train_seed: 0,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,

            eta: 0.0,
            guidance_w: 2.0,
            inference_steps: 10,
            batch_features: BatchFeatureSource::TestImage,
            inference_seed: 0,
            eval_batch_size: 16,

            score_layers: vec![0, 1],
            score_weights: vec![1.0, 1.0],
            smooth_sigma: 4.0,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

/// Parses a `--set` value: JSON first, then a TOML value, else a bare string.
fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if let Ok(t) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = t.get("v").and_then(|v| serde_json::to_value(v).ok()) {
            return v;
        }
    }
    Value::String(raw.to_string())
}

impl RunConfig {
    /// Reads a TOML or JSON file (JSON when the extension is `.json` or the
    /// text starts with `{`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, path.extension().is_some_and(|e| e == "json"))
    }

    pub fn from_text(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json || text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(config_err)?
        } else {
            toml::from_str(text).map_err(config_err)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = serde_json::to_value(self)?;
        let map = v.as_object_mut().expect("struct serialises to an object");
        for o in overrides {
            let o = o.as_ref();
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            if !map.contains_key(k) {
                return Err(PipelineError::Config(format!("unknown key {k:?}")));
            }
            map.insert(k.to_string(), parse_value(raw.trim()));
        }
        let cfg: Self = serde_json::from_value(v).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if self.score_layers.is_empty() || self.score_layers.len() != self.score_weights.len() {
            return bad(format!(
                "{} score_layers but {} score_weights",
                self.score_layers.len(),
                self.score_weights.len()
            ));
        }
        if let Some(l) = self.score_layers.iter().find(|l| **l >= self.extractor_widths.len()) {
            return bad(format!("score layer {l} does not exist"));
        }
        if self.score_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("score_weights must be finite and non-negative".into());
        }
        if !(self.smooth_sigma.is_finite() && self.smooth_sigma >= 0.0) {
            return bad("smooth_sigma must be finite and >= 0".into());
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be positive".into());
        }
        self.extractor_config().validate()?;
        self.model_spec().validate()?;
        self.train_config().validate()?;
        let m = self.model_spec().backbone.spatial_multiple() * self.codec_factor();
        if self.image_size % m != 0 || self.image_size % self.patch_stride != 0 {
            return bad(format!(
                "image_size {} must be a multiple of {m} and of patch_stride {}",
                self.image_size, self.patch_stride
            ));
        }
        Ok(())
    }

    fn codec_factor(&self) -> usize {
        if self.variant == Variant::V {
            1
        } else {
            2
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.synth_seed,
            category: self.synth_category.clone(),
            n_train: self.synth_n_train,
            n_test_good: self.synth_n_test_good,
            n_test_defect: self.synth_n_test_defect,
            size: self.image_size,
            texture: self.synth_texture,
            defect: self.synth_defect,
            defect_intensity: self.synth_intensity,
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            kind: ExtractorKind::SeededConv,
            seed: self.extractor_seed,
            layer_spec: self.extractor_layers.clone(),
            d: self.feature_dim,
            m: self.patch_stride,
            widths: self.extractor_widths.clone(),
            import_path: None,
        }
    }

    pub fn coreset_init(&self) -> CoresetInit {
        self.coreset_first.map_or(CoresetInit::MaxNorm, CoresetInit::Index)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut s = ModelSpec::new(self.variant, 3, self.extractor_config());
        let b = &mut s.backbone;
        b.base_width = self.base_width;
        b.channel_mult = self.channel_mult.clone();
        b.attention_levels = self.attention_levels;
        b.heads = self.heads;
        b.groups = self.groups;
        b.cond_inner = self.cond_inner;
        b.zero_init_cond = self.zero_init_cond;
        b.seed = self.model_seed;
        if s.codec.mode == CodecMode::TinyConvAe {
            s.codec.latent_channels = self.codec_latent_channels;
            b.in_channels = self.codec_latent_channels;
        }
        s.codec.hidden = self.codec_hidden;
        s.codec.train_steps = self.codec_steps;
        s.codec.batch_size = self.codec_batch_size;
        s.codec.learning_rate = self.codec_lr;
        s.codec.mae_threshold = self.codec_mae_threshold;
        s.codec.seed = self.codec_seed;
        s.fcm_inner = self.fcm_inner;
        s.fcm_heads = self.fcm_heads;
        s.fcm_seed = self.fcm_seed;
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.variant);
        t.epochs = self.epochs;
        t.max_steps = self.max_steps;
        t.batch_size = self.batch_size;
        if let Some(lr) = self.learning_rate {
            t.learning_rate = lr;
        }
        if let Some(o) = self.optimizer {
            t.optimizer = o;
        }
        t.weight_decay = self.weight_decay;
        t.clip_norm = self.clip_norm;
        t.seed = self.train_seed;
        t.diffusion_steps = self.diffusion_steps;
        t.beta_start = self.beta_start;
        t.beta_end = self.beta_end;
        t.eta = self.eta;
        t.guidance_w = self.guidance_w;
        t.inference_steps = self.inference_steps;
        t.batch_features = self.batch_features;
        t
    }

    /// Every artifact path, derived from `work_dir`.
    pub fn paths(&self) -> ArtifactPaths {
        let w = &self.work_dir;
        ArtifactPaths {
            bank: w.join("bank.ccadbnk"),
            bank_echo: w.join("bank.config.json"),
            checkpoint: w.join("model.ccadckpt"),
            checkpoint_echo: w.join("model.config.json"),
            train_log: w.join("train_log.json"),
            reconstructions: w.join("reconstructions.npy"),
            reconstruction_pngs: w.join("reconstructions"),
            maps: w.join("maps.npy"),
            map_pngs: w.join("maps"),
            scores: w.join("scores.json"),
            report: w.join("report.json"),
            summary: w.join("report.md"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub bank: PathBuf,
    pub bank_echo: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoint_echo: PathBuf,
    pub train_log: PathBuf,
    pub reconstructions: PathBuf,
    pub reconstruction_pngs: PathBuf,
    pub maps: PathBuf,
    pub map_pngs: PathBuf,
    pub scores: PathBuf,
    pub report: PathBuf,
    pub summary: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip_through_both_formats() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_text(&json, true).unwrap(), c);
        let toml = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_text(&toml, false).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_text("no_such_key = 3", false).is_err());
        assert!(RunConfig::default().with_overrides(&["no_such_key=3"]).is_err());
    }

    #[test]
    fn overrides_parse_typed_values() {
        let c = RunConfig::default()
            .with_overrides(&[
                "variant=c",
                "max_steps=50",
                "learning_rate=1e-3",
                "channel_mult=[1,2]",
                "max_steps = 7",
            ])
            .unwrap();
        assert_eq!(c.variant, Variant::C);
        assert_eq!(c.max_steps, Some(7));
        assert_eq!(c.learning_rate, Some(1e-3));
        assert_eq!(c.channel_mult, vec![1, 2]);
        let t = c.train_config();
        assert_eq!(t.optimizer, OptimizerKind::AdamW);
        let c = c.with_overrides(&["max_steps=null"]).unwrap();
        assert_eq!(c.max_steps, None);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig::default();
        assert!(c.with_overrides(&["score_weights=[1.0]"]).is_err());
        assert!(c.with_overrides(&["image_size=30"]).is_err());
        assert!(c.with_overrides(&["feature_dim=1000"]).is_err());
        assert!(c.with_overrides(&["inference_steps=0"]).is_err());
    }
}
