//! The model bundle and its training loop.

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::losses::{loss_ccad_c, loss_ccad_f, loss_ccad_v};
use super::optim::Optimizer;
use crate::attention::AttentionParams;
use crate::backbone::{BackboneConfig, Denoiser, Variant};
use crate::backbone::{CodecConfig, CodecMode, LatentCodec};
use crate::error::{Error, Result};
use crate::feature_bank::{extract_batch, CoarseFeatureBank, Extractor, ExtractorConfig};
use crate::fine_compression::{init_params, DEFAULT_HEADS, DEFAULT_INNER};
use crate::nn::params::{ParamStore, Scope};

/// Everything needed to rebuild a model's architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub codec: CodecConfig,
    pub extractor: ExtractorConfig,
    pub fcm_inner: usize,
    pub fcm_heads: usize,
    pub fcm_seed: u64,
}

impl ModelSpec {
    /// Consistent defaults for `variant` on `image_channels`-channel images.
    /// The latent variants get a 2× autoencoder and take the image itself as
    /// the local condition.
    pub fn new(variant: Variant, image_channels: usize, extractor: ExtractorConfig) -> Self {
        let mut backbone = BackboneConfig::new(variant, extractor.d);
        let codec = CodecConfig {
            mode: if variant == Variant::V {
                CodecMode::Identity
            } else {
                CodecMode::TinyConvAe
            },
            image_channels,
            ..CodecConfig::default()
        };
        match variant {
            Variant::V => backbone.in_channels = image_channels,
            Variant::F | Variant::C => {
                backbone.in_channels = codec.latent_channels;
                backbone.local_channels = image_channels;
                backbone.local_downsample = 2;
            }
        }
        Self {
            backbone,
            codec,
            extractor,
            fcm_inner: DEFAULT_INNER,
            fcm_heads: DEFAULT_HEADS,
            fcm_seed: 0,
        }
    }

    pub fn variant(&self) -> Variant {
        self.backbone.variant
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.extractor.validate()?;
        if self.backbone.bank_dim != self.extractor.d {
            return Err(Error::Config(format!(
                "backbone bank dim {} differs from feature dim {}",
                self.backbone.bank_dim, self.extractor.d
            )));
        }
        let latent = self.variant() != Variant::V;
        if latent != (self.codec.mode == CodecMode::TinyConvAe) {
            return Err(Error::Config(format!(
                "variant {} needs {} codec",
                self.variant(),
                if latent { "an autoencoder" } else { "the identity" }
            )));
        }
        if self.variant() == Variant::F && (self.fcm_heads == 0 || self.fcm_inner % self.fcm_heads != 0) {
            return Err(Error::param(
                "fcm_heads",
                "fine compression inner dim must divide into heads",
            ));
        }
        Ok(())
    }
}

/// Trainable fine compression parameters plus the frozen encoder producing
/// its queries.
#[derive(Debug, Clone)]
pub struct FcmModule {
    pub store: ParamStore,
    pub params: AttentionParams,
    pub extractor: Extractor,
}

impl FcmModule {
    pub fn new(spec: &ModelSpec, image_channels: usize) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32, &Device::Cpu, spec.fcm_seed);
        let params = init_params(
            &mut Scope::new(&mut store, "fcm", true),
            spec.extractor.d,
            spec.fcm_inner,
            spec.fcm_heads,
        )?;
        Ok(Self {
            store,
            params,
            extractor: Extractor::new(&spec.extractor, image_channels)?,
        })
    }

    /// Per-image query sets `(B, n, d)` for a batch of images.
    pub fn batch_features(&self, images: &Tensor) -> Result<Tensor> {
        let space = extract_batch(&self.extractor, images)?;
        let n = space.rows() / space.n_images;
        Ok(Tensor::from_vec(
            space.vectors,
            (space.n_images, n, space.d),
            &Device::Cpu,
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct CcadModel {
    pub spec: ModelSpec,
    pub denoiser: Denoiser,
    pub codec: LatentCodec,
    pub fcm: Option<FcmModule>,
}

impl CcadModel {
    /// Assembles a model around an already fitted codec.
    pub fn with_codec(spec: &ModelSpec, codec: LatentCodec) -> Result<Self> {
        spec.validate()?;
        let fcm = match spec.variant() {
            Variant::F => Some(FcmModule::new(spec, spec.codec.image_channels)?),
            _ => None,
        };
        Ok(Self {
            spec: spec.clone(),
            denoiser: Denoiser::new(&spec.backbone, DType::F32)?,
            codec,
            fcm,
        })
    }

    /// Builds the model, fitting the codec on `images` first when the
    /// variant works in latent space.
    pub fn build(spec: &ModelSpec, images: &Tensor) -> Result<Self> {
        spec.validate()?;
        let codec = LatentCodec::fit(&spec.codec, images)?;
        Self::with_codec(spec, codec)
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.denoiser.store().trainable().into_iter().map(|(_, v)| v).collect();
        if let Some(f) = &self.fcm {
            v.extend(f.store.trainable().into_iter().map(|(_, v)| v));
        }
        v
    }

    /// Digest of the frozen denoiser blocks.
    pub fn frozen_digest(&self) -> Result<String> {
        self.denoiser.store().digest(Some(false))
    }

    /// Checks that `bank` fits this model.
    pub fn check_bank(&self, bank: &CoarseFeatureBank) -> Result<()> {
        if bank.d != self.spec.backbone.bank_dim {
            return Err(Error::Config(format!(
                "bank rows have dim {}, model expects {}",
                bank.d, self.spec.backbone.bank_dim
            )));
        }
        let fp = self.spec.extractor.fingerprint();
        if bank.extractor_fingerprint != fp {
            return Err(Error::Config(format!(
                "bank was built by `{}`, model uses `{fp}`",
                bank.extractor_fingerprint
            )));
        }
        Ok(())
    }
}

/// Progress of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    /// One entry per completed step.
    pub losses: Vec<f64>,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    /// Digest of the trainable parameters after the last step.
    pub param_digest: String,
}

impl TrainState {
    /// Mean of the first and last `n` losses.
    pub fn loss_ends(&self, n: usize) -> Option<(f64, f64)> {
        if self.losses.len() < n || n == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..n]), mean(&self.losses[self.losses.len() - n..])))
    }
}

/// Trains `model` on `images` `(N, C, H, W)` (values in [−1, 1]).
pub fn train(
    model: &mut CcadModel,
    images: &Tensor,
    bank: Option<&CoarseFeatureBank>,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    train_with(model, images, bank, cfg, |_, _| {})
}

/// [`train`] with a per-step callback receiving `(step, loss)`.
pub fn train_with(
    model: &mut CcadModel,
    images: &Tensor,
    bank: Option<&CoarseFeatureBank>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.variant != model.variant() {
        return Err(Error::Config(format!(
            "train config is for variant {}, model is {}",
            cfg.variant,
            model.variant()
        )));
    }
    let bank =
        bank.ok_or_else(|| Error::Config("bank required: build a coarse feature bank before training".into()))?;
    model.check_bank(bank)?;
    let (n, _, _, _) = images.dims4()?;
    if n == 0 {
        return Err(Error::param("data", "no training images"));
    }
    let images = images.to_dtype(DType::F32)?.detach();
    let schedule = cfg.schedule()?;
    let bank_tokens = bank.tokens(&images)?;
    // Precomputed once: the codec and the feature encoder are fixed.
    let latents = match model.variant() {
        Variant::V => None,
        _ => Some(model.codec.encode(&images)?.detach()),
    };
    let features = match &model.fcm {
        Some(f) => Some(f.batch_features(&images)?),
        None => None,
    };

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut opt = Optimizer::new(model.trainable_vars(), cfg.optimizer_config())?;
    let batch = cfg.batch_size.min(n);
    let total = cfg.total_steps(n);
    let mut order: Vec<u32> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(total);

    for step in 0..total {
        if cursor + batch > order.len() {
            order = (0..n as u32).collect();
            order.shuffle(&mut data_rng);
            cursor = 0;
        }
        let idx = Tensor::new(&order[cursor..cursor + batch], &Device::Cpu)?;
        cursor += batch;
        let x = images.index_select(&idx, 0)?;
        let loss = match model.variant() {
            Variant::V => loss_ccad_v(&model.denoiser, &x, Some(&bank_tokens), &schedule, &mut noise_rng)?,
            Variant::C => {
                let z = latents.as_ref().expect("latents").index_select(&idx, 0)?;
                loss_ccad_c(&model.denoiser, &z, &x, Some(&bank_tokens), &schedule, &mut noise_rng)?
            }
            Variant::F => {
                let z = latents.as_ref().expect("latents").index_select(&idx, 0)?;
                let q = features.as_ref().expect("features").index_select(&idx, 0)?;
                let fcm = &model.fcm.as_ref().expect("fcm").params;
                loss_ccad_f(
                    &model.denoiser,
                    &z,
                    &x,
                    &q,
                    Some(&bank_tokens),
                    fcm,
                    &schedule,
                    &mut noise_rng,
                )?
            }
        };
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(divergence(step, value, &losses, model));
        }
        let grads = loss.backward()?;
        opt.step(&grads).map_err(|e| match e {
            Error::Divergence { diagnostic, .. } => Error::Divergence {
                step,
                diagnostic: format!("{diagnostic}; loss {value}"),
            },
            other => other,
        })?;
        losses.push(value);
        on_step(step, value);
        if step % 100 == 0 {
            log::debug!("step {step}/{total} loss {value:.5}");
        }
    }

    Ok(TrainState {
        step: total,
        losses,
        data_rng,
        noise_rng,
        param_digest: model.denoiser.store().digest(Some(true))?,
    })
}

fn divergence(step: usize, value: f64, losses: &[f64], model: &CcadModel) -> Error {
    let recent = &losses[losses.len().saturating_sub(5)..];
    let digest = model
        .denoiser
        .store()
        .digest(Some(true))
        .unwrap_or_else(|e| format!("<{e}>"));
    Error::Divergence {
        step,
        diagnostic: format!("loss {value}; previous losses {recent:?}; trainable digest {digest}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_bank::extract_features;
    use crate::feature_bank::{coreset_compress, CoresetInit};

    pub(crate) fn tiny_spec(variant: Variant) -> ModelSpec {
        let ex = ExtractorConfig {
            widths: vec![8, 8],
            layer_spec: vec![0, 1],
            d: 8,
            m: 4,
            ..ExtractorConfig::default()
        };
        let mut s = ModelSpec::new(variant, 3, ex);
        s.backbone.base_width = 8;
        s.backbone.channel_mult = vec![1, 2];
        s.backbone.attention_levels = 1;
        s.backbone.heads = 2;
        s.backbone.groups = 4;
        s.backbone.cond_inner = 8;
        s.codec.hidden = 8;
        s.codec.train_steps = 10;
        s.codec.mae_threshold = 10.0;
        s.fcm_inner = 8;
        s.fcm_heads = 2;
        s
    }

    pub(crate) fn tiny_images(n: usize) -> Tensor {
        let v: Vec<f32> = (0..n * 3 * 16 * 16).map(|i| ((i as f32) * 0.37).sin()).collect();
        Tensor::from_vec(v, (n, 3, 16, 16), &Device::Cpu).unwrap()
    }

    pub(crate) fn tiny_bank(spec: &ModelSpec, images: &Tensor) -> CoarseFeatureBank {
        let list: Vec<Tensor> = (0..images.dim(0).unwrap()).map(|i| images.get(i).unwrap()).collect();
        let space = extract_features(&list, &spec.extractor).unwrap();
        coreset_compress(&space, 6, CoresetInit::MaxNorm).unwrap().0
    }

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        let mut c = TrainConfig::new(variant);
        c.batch_size = 2;
        c.max_steps = Some(2);
        c.diffusion_steps = 50;
        c.inference_steps = 5;
        c
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_equal() {
        for v in [Variant::F, Variant::C, Variant::V] {
            let spec = tiny_spec(v);
            let x = tiny_images(3);
            let mut m = CcadModel::build(&spec, &x).unwrap();
            let bank = tiny_bank(&spec, &x);
            let before = m.denoiser.store().digest(None).unwrap();
            let fcm_before = m.fcm.as_ref().map(|f| f.store.digest(None).unwrap());
            let mut cfg = tiny_cfg(v);
            cfg.learning_rate = 0.0;
            cfg.max_steps = Some(1);
            let st = train(&mut m, &x, Some(&bank), &cfg).unwrap();
            assert_eq!(st.losses.len(), 1);
            assert_eq!(before, m.denoiser.store().digest(None).unwrap());
            assert_eq!(fcm_before, m.fcm.as_ref().map(|f| f.store.digest(None).unwrap()));
        }
    }

    #[test]
    fn same_seed_same_history_and_frozen_blocks_untouched() {
        let spec = tiny_spec(Variant::C);
        let x = tiny_images(4);
        let bank = tiny_bank(&spec, &x);
        let base = CcadModel::build(&spec, &x).unwrap();
        let frozen = base.frozen_digest().unwrap();
        // clones would share parameter storage, so rebuild from the codec
        let mut a = CcadModel::with_codec(&spec, base.codec.clone()).unwrap();
        let mut b = CcadModel::with_codec(&spec, base.codec.clone()).unwrap();
        let cfg = tiny_cfg(Variant::C);
        let ha = train(&mut a, &x, Some(&bank), &cfg).unwrap();
        let hb = train(&mut b, &x, Some(&bank), &cfg).unwrap();
        assert_eq!(ha.losses, hb.losses);
        assert_eq!(ha.param_digest, hb.param_digest);
        assert_eq!(a.frozen_digest().unwrap(), frozen);
    }

    #[test]
    fn training_without_a_bank_is_a_config_error() {
        let spec = tiny_spec(Variant::C);
        let x = tiny_images(2);
        let mut m = CcadModel::build(&spec, &x).unwrap();
        let e = train(&mut m, &x, None, &tiny_cfg(Variant::C)).unwrap_err();
        assert!(matches!(&e, Error::Config(msg) if msg.contains("bank required")), "{e}");
    }

    #[test]
    fn diverging_run_reports_the_step() {
        let spec = tiny_spec(Variant::V);
        let x = tiny_images(2);
        let bank = tiny_bank(&spec, &x);
        let mut m = CcadModel::build(&spec, &x).unwrap();
        let bad = (x.ones_like().unwrap() * f64::NAN).unwrap();
        let e = train(&mut m, &bad, Some(&bank), &tiny_cfg(Variant::V)).unwrap_err();
        assert!(matches!(e, Error::Divergence { step: 0, .. }), "{e}");
    }
}
