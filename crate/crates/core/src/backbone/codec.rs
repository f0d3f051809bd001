use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Silu};
use crate::nn::ops::upsample_nearest2x;
use crate::nn::params::{ParamStore, Scope};
use crate::training::optim::{Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    Identity,
    TinyConvAe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub seed: u64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-pixel mean absolute reconstruction error the training must reach.
    pub mae_threshold: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::Identity,
            image_channels: 3,
            latent_channels: 4,
            hidden: 16,
            seed: 0,
            train_steps: 1000,
            batch_size: 8,
            learning_rate: 4e-3,
            mae_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
struct AutoEncoder {
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

impl AutoEncoder {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, c) in self.enc.iter().enumerate() {
            h = c.forward(&h)?;
            if i + 1 < self.enc.len() {
                h = h.apply(&Silu)?;
            }
        }
        Ok(h)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = upsample_nearest2x(z)?;
        for (i, c) in self.dec.iter().enumerate() {
            h = c.forward(&h)?;
            if i + 1 < self.dec.len() {
                h = h.apply(&Silu)?;
            }
        }
        Ok(h)
    }
}

/// Maps images to the space the denoiser works in and back.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    cfg: CodecConfig,
    store: ParamStore,
    ae: Option<AutoEncoder>,
    /// Multiplier bringing latents to roughly unit variance.
    scale: f64,
    train_mae: Option<f64>,
}

impl LatentCodec {
    pub fn identity() -> Self {
        Self {
            cfg: CodecConfig::default(),
            store: ParamStore::new(DType::F32, &Device::Cpu, 0),
            ae: None,
            scale: 1.0,
            train_mae: None,
        }
    }

    /// Untrained codec of the configured shape.
    pub fn new(cfg: &CodecConfig) -> Result<Self> {
        if cfg.mode == CodecMode::Identity {
            return Ok(Self {
                cfg: cfg.clone(),
                ..Self::identity()
            });
        }
        if cfg.latent_channels == 0 || cfg.hidden == 0 || cfg.image_channels == 0 {
            return Err(Error::param("latent_channels", "codec widths must be positive"));
        }
        let mut store = ParamStore::new(DType::F32, &Device::Cpu, cfg.seed);
        let (c, h, l) = (cfg.image_channels, cfg.hidden, cfg.latent_channels);
        let ae = {
            let mut s = Scope::new(&mut store, "codec", true);
            AutoEncoder {
                enc: vec![
                    Conv2d::new(&mut s.sub("enc0"), c, h, 3, 1, 1)?,
                    Conv2d::new(&mut s.sub("enc1"), h, h, 3, 2, 1)?,
                    Conv2d::new(&mut s.sub("enc2"), h, l, 3, 1, 1)?,
                ],
                dec: vec![
                    Conv2d::new(&mut s.sub("dec0"), l, h, 3, 1, 1)?,
                    Conv2d::new(&mut s.sub("dec1"), h, h, 3, 1, 1)?,
                    Conv2d::new(&mut s.sub("dec2"), h, c, 3, 1, 1)?,
                ],
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            ae: Some(ae),
            scale: 1.0,
            train_mae: None,
        })
    }

    /// Builds and, for the autoencoder, fits the codec on `images`
    /// `(N, C, H, W)`. Fails if the fitted error stays above the threshold.
    pub fn fit(cfg: &CodecConfig, images: &Tensor) -> Result<Self> {
        let mut codec = Self::new(cfg)?;
        let Some(ae) = codec.ae.clone() else {
            return Ok(codec);
        };
        let images = images.to_dtype(DType::F32)?;
        let n = images.dim(0)?;
        let vars: Vec<_> = codec.store.trainable().into_iter().map(|(_, v)| v).collect();
        let mut opt_cfg = OptimizerConfig::new(OptimizerKind::Adam, cfg.learning_rate, 0.0);
        opt_cfg.clip_norm = None;
        let mut opt = Optimizer::new(vars, opt_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<u32> = (0..n as u32).collect();
        let bs = cfg.batch_size.clamp(1, n);
        let mut cursor = n;
        for step in 0..cfg.train_steps {
            if cursor + bs > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = Tensor::from_slice(&order[cursor..cursor + bs], bs, &Device::Cpu)?;
            cursor += bs;
            let x = images.index_select(&idx, 0)?;
            let rec = ae.decode(&ae.encode(&x)?)?;
            let loss = (rec - &x)?.sqr()?.mean_all()?;
            let l = loss.to_scalar::<f32>()?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    step,
                    diagnostic: format!("codec loss {l}"),
                });
            }
            opt.step(&loss.backward()?)?;
        }
        let z = ae.encode(&images)?;
        let std = z.flatten_all()?.to_dtype(DType::F64)?;
        let mean = std.mean_all()?.to_scalar::<f64>()?;
        let var = std.affine(1.0, -mean)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
        codec.scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        let mae = (codec.decode(&codec.encode(&images)?)? - &images)?
            .abs()?
            .mean_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        codec.train_mae = Some(mae);
        if mae > cfg.mae_threshold {
            return Err(Error::Config(format!(
                "codec reconstruction MAE {mae:.4} above threshold {}",
                cfg.mae_threshold
            )));
        }
        Ok(codec)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn mode(&self) -> CodecMode {
        if self.ae.is_some() {
            CodecMode::TinyConvAe
        } else {
            CodecMode::Identity
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, s: f64) {
        self.scale = s;
    }

    pub fn train_mae(&self) -> Option<f64> {
        self.train_mae
    }

    /// Spatial reduction factor of the latent grid.
    pub fn factor(&self) -> usize {
        if self.ae.is_some() {
            2
        } else {
            1
        }
    }

    pub fn latent_channels(&self, image_channels: usize) -> usize {
        if self.ae.is_some() {
            self.cfg.latent_channels
        } else {
            image_channels
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        match &self.ae {
            None => Ok(x.clone()),
            Some(ae) => {
                if c != self.cfg.image_channels || h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Shape(format!("codec cannot encode {:?}", x.dims())));
                }
                let dt = x.dtype();
                Ok(ae
                    .encode(&x.to_dtype(DType::F32)?)?
                    .affine(self.scale, 0.0)?
                    .to_dtype(dt)?)
            }
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        match &self.ae {
            None => Ok(z.clone()),
            Some(ae) => {
                if c != self.cfg.latent_channels {
                    return Err(Error::Shape(format!("codec cannot decode {:?}", z.dims())));
                }
                let dt = z.dtype();
                Ok(ae
                    .decode(&z.to_dtype(DType::F32)?.affine(1.0 / self.scale, 0.0)?)?
                    .to_dtype(dt)?)
            }
        }
    }
}

pub fn latent_encode(x: &Tensor, codec: &LatentCodec) -> Result<Tensor> {
    codec.encode(x)
}

pub fn latent_decode(z: &Tensor, codec: &LatentCodec) -> Result<Tensor> {
    codec.decode(z)
}
