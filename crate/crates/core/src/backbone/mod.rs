//! Denoiser networks with bank-conditioned blocks, and the pixel/latent
//! codec.

mod blocks;
mod codec;
mod unet;

pub use blocks::{gcb_forward, GCBlockFC, GCBlockV, GcBlock, ResBlock, SelfAttention};
pub use codec::{latent_decode, latent_encode, CodecConfig, CodecMode, LatentCodec};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::schedules::TimeStep;
use unet::{Gcdm, UNetV};

/// Which conditioning scheme a denoiser implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Latent denoiser conditioned on the fine (attention-compressed) bank.
    F,
    /// Latent denoiser conditioned on the coarse bank directly.
    C,
    /// Pixel-space UNet with target-guided sampling.
    V,
}

impl Variant {
    pub fn needs_local(self) -> bool {
        matches!(self, Variant::F | Variant::C)
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::F => 0,
            Variant::C => 1,
            Variant::V => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::F),
            1 => Some(Variant::C),
            2 => Some(Variant::V),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::F => "f",
            Variant::C => "c",
            Variant::V => "v",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f" => Ok(Variant::F),
            "c" => Ok(Variant::C),
            "v" => Ok(Variant::V),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected f, c or v)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Channels of the denoised signal (image or latent).
    pub in_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level, finest first.
    pub channel_mult: Vec<usize>,
    /// Number of coarsest levels (plus the middle) carrying attention and
    /// conditioning blocks.
    pub attention_levels: usize,
    pub heads: usize,
    pub groups: usize,
    /// Feature dimension of bank tokens.
    pub bank_dim: usize,
    /// Inner dimension of the conditioning cross-attention.
    pub cond_inner: usize,
    pub zero_init_cond: bool,
    /// Channels of the local condition image (F/C).
    pub local_channels: usize,
    /// Spatial factor between the local condition and the denoised signal.
    pub local_downsample: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(variant: Variant, bank_dim: usize) -> Self {
        Self {
            variant,
            in_channels: 3,
            base_width: 32,
            channel_mult: vec![1, 2, 4, 4],
            attention_levels: 3,
            heads: 4,
            groups: 8,
            bank_dim,
            cond_inner: 64,
            zero_init_cond: true,
            local_channels: 3,
            local_downsample: 1,
            seed: 0,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_width).collect()
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    /// Required divisor of the spatial input size.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.channel_mult.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("base_width", self.base_width),
            ("heads", self.heads),
            ("groups", self.groups),
            ("bank_dim", self.bank_dim),
            ("cond_inner", self.cond_inner),
            ("local_downsample", self.local_downsample),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::param(field, "must be positive"));
            }
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::param("channel_mult", "must be non-empty and positive"));
        }
        if self.attention_levels > self.channel_mult.len() {
            return Err(Error::param("attention_levels", "exceeds the number of levels"));
        }
        if !self.local_downsample.is_power_of_two() {
            return Err(Error::param("local_downsample", "must be a power of two"));
        }
        for w in self.widths() {
            if w % self.heads != 0 {
                return Err(Error::param(
                    "heads",
                    format!("width {w} not divisible by {} heads", self.heads),
                ));
            }
        }
        if self.cond_inner % self.heads != 0 {
            return Err(Error::param("cond_inner", "not divisible by heads"));
        }
        Ok(())
    }
}

/// Conditioning inputs for one denoiser call.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    /// Spatial condition image (F/C only).
    pub local: Option<&'a Tensor>,
    /// Bank tokens: `(n, d)` shared across the batch or `(B, n, d)`.
    pub bank: &'a Tensor,
}

/// Anything that predicts the noise in `x_t`.
pub trait EpsModel {
    fn variant(&self) -> Variant;
    fn eps(&self, x_t: &Tensor, ts: &[TimeStep], cond: &Conditioning<'_>) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
enum Net {
    V(UNetV),
    FC(Gcdm),
}

/// A denoiser together with the store that owns its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: BackboneConfig,
    store: ParamStore,
    net: Net,
}

impl Denoiser {
    pub fn new(cfg: &BackboneConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, &Device::Cpu, cfg.seed);
        let net = match cfg.variant {
            Variant::V => Net::V(UNetV::new(&mut store, cfg)?),
            Variant::F | Variant::C => Net::FC(Gcdm::new(&mut store, cfg)?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            net,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Cross-attention parameters of every conditioning block.
    pub fn gcb_cross_params(&self) -> Vec<&AttentionParams> {
        match &self.net {
            Net::V(n) => n.gcb_cross(),
            Net::FC(n) => n.gcb_cross(),
        }
    }

    /// Overwrites frozen parameters from `(name, tensor)` pairs, e.g. weights
    /// exported by another implementation. Names must already exist.
    pub fn import_frozen<'a>(&self, weights: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<usize> {
        let mut n = 0;
        for (name, t) in weights {
            match self.store.param(name) {
                Some(p) if !p.trainable => self.store.set(name, t)?,
                Some(_) => return Err(Error::Config(format!("{name} is trainable, not frozen"))),
                None => return Err(Error::Config(format!("unknown parameter {name}"))),
            }
            n += 1;
        }
        Ok(n)
    }

    fn check(&self, x: &Tensor, ts: &[TimeStep], cond: &Conditioning<'_>) -> Result<()> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        let m = self.cfg.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("spatial size {h}x{w} must be a multiple of {m}")));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for a batch of {b}", ts.len())));
        }
        let d = *cond.bank.dims().last().unwrap_or(&0);
        if !matches!(cond.bank.rank(), 2 | 3) || d != self.cfg.bank_dim {
            return Err(Error::Shape(format!(
                "bank tokens {:?} do not end in the model's bank dim {}",
                cond.bank.dims(),
                self.cfg.bank_dim
            )));
        }
        if cond.bank.rank() == 3 && cond.bank.dim(0)? != b {
            return Err(Error::Shape(format!(
                "per-sample bank batch {} vs input batch {b}",
                cond.bank.dim(0)?
            )));
        }
        match (self.cfg.variant.needs_local(), cond.local) {
            (true, None) => Err(Error::Config(format!(
                "variant {} requires a local condition",
                self.cfg.variant
            ))),
            (false, Some(_)) => Err(Error::Config(format!(
                "variant {} takes no local condition",
                self.cfg.variant
            ))),
            (true, Some(l)) => {
                let (lb, lc, lh, lw) = l.dims4()?;
                let f = self.cfg.local_downsample;
                if lb != b || lc != self.cfg.local_channels || lh != h * f || lw != w * f {
                    return Err(Error::Shape(format!(
                        "local condition {:?} incompatible with input {:?}",
                        l.dims(),
                        x.dims()
                    )));
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }
}

impl EpsModel for Denoiser {
    fn variant(&self) -> Variant {
        self.cfg.variant
    }

    fn eps(&self, x_t: &Tensor, ts: &[TimeStep], cond: &Conditioning<'_>) -> Result<Tensor> {
        self.check(x_t, ts, cond)?;
        let dt = self.dtype();
        let x = x_t.to_dtype(dt)?;
        let bank = cond.bank.to_dtype(dt)?;
        let tv: Vec<f64> = ts.iter().map(|t| t.get() as f64).collect();
        match &self.net {
            Net::V(n) => n.forward(&x, &tv, &bank),
            Net::FC(n) => {
                let local = cond.local.expect("checked").to_dtype(dt)?;
                n.forward(&x, &tv, &local, &bank)
            }
        }
    }
}

/// Noise prediction for a batch sharing one timestep.
pub fn denoise_eps(
    model: &dyn EpsModel,
    x: &Tensor,
    t: TimeStep,
    local_cond: Option<&Tensor>,
    bank_tokens: &Tensor,
) -> Result<Tensor> {
    let b = x.dim(0)?;
    model.eps(
        x,
        &vec![t; b],
        &Conditioning {
            local: local_cond,
            bank: bank_tokens,
        },
    )
}
