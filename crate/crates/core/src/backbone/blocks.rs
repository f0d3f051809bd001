use candle_core::Tensor;

use crate::attention::{cross_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::layers::{from_tokens, to_tokens, Conv2d, GroupNorm, LayerNorm, Linear, Silu};
use crate::nn::params::{Init, Scope};

/// Residual block with a timestep-embedding shift.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(s: &mut Scope, cin: usize, cout: usize, tdim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut s.sub("norm1"), cin, groups)?,
            conv1: Conv2d::new(&mut s.sub("conv1"), cin, cout, 3, 1, 1)?,
            temb: Linear::new(&mut s.sub("temb"), tdim, cout)?,
            norm2: GroupNorm::new(&mut s.sub("norm2"), cout, groups)?,
            conv2: Conv2d::new(&mut s.sub("conv2"), cout, cout, 3, 1, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(&mut s.sub("skip"), cin, cout, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    /// `x`: (B, C, H, W); `temb`: (B, tdim).
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.apply(&Silu)?)?;
        let (b, c, _, _) = h.dims4()?;
        let shift = self.temb.forward(&temb.apply(&Silu)?)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&shift)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.apply(&Silu)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: GroupNorm,
    attn: AttentionParams,
}

impl SelfAttention {
    pub fn new(s: &mut Scope, channels: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut s.sub("norm"), channels, groups)?,
            attn: AttentionParams::init(&mut s.sub("attn"), channels, channels, channels, channels, heads, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let t = to_tokens(&self.norm.forward(x)?)?;
        let a = cross_attention(&t, &t, &self.attn)?;
        Ok((x + from_tokens(&a, h, w)?)?)
    }
}

fn bank_is_empty(bank: &Tensor) -> Result<bool> {
    let n = match bank.rank() {
        2 => bank.dim(0)?,
        3 => bank.dim(1)?,
        r => return Err(Error::Shape(format!("bank tokens must be rank 2 or 3, got {r}"))),
    };
    Ok(n == 0)
}

/// Conditioning block for the pixel-space UNet: pre-normalised spatial
/// tokens attend to the bank tokens and the result is added back.
#[derive(Debug, Clone)]
pub struct GCBlockV {
    norm: GroupNorm,
    cross: AttentionParams,
}

impl GCBlockV {
    pub fn new(
        s: &mut Scope,
        channels: usize,
        bank_dim: usize,
        inner: usize,
        heads: usize,
        groups: usize,
        zero_init: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut s.sub("norm"), channels, groups)?,
            cross: AttentionParams::init(
                &mut s.sub("cross"),
                channels,
                bank_dim,
                inner,
                channels,
                heads,
                zero_init,
            )?,
        })
    }

    pub fn cross(&self) -> &AttentionParams {
        &self.cross
    }

    /// `x`: (B, C, H, W); `bank`: (ξ, d) shared or (B, n, d) per sample.
    /// An empty bank leaves `x` untouched.
    pub fn forward(&self, x: &Tensor, bank: &Tensor) -> Result<Tensor> {
        if bank_is_empty(bank)? {
            return Ok(x.clone());
        }
        let (_, _, h, w) = x.dims4()?;
        let t = to_tokens(&self.norm.forward(x)?)?;
        let a = cross_attention(&t, bank, &self.cross)?;
        Ok((x + from_tokens(&a, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Transformer-style conditioning block for the latent denoiser: self
/// attention, cross-attention over bank tokens and a feed-forward layer,
/// each pre-normalised and residual, wrapped in 1×1 in/out projections.
#[derive(Debug, Clone)]
pub struct GCBlockFC {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln1: LayerNorm,
    self_attn: AttentionParams,
    ln2: LayerNorm,
    cross: AttentionParams,
    ln3: LayerNorm,
    ff: FeedForward,
    proj_out: Conv2d,
}

impl GCBlockFC {
    pub fn new(
        s: &mut Scope,
        channels: usize,
        bank_dim: usize,
        inner: usize,
        heads: usize,
        groups: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let out_init = if zero_init {
            Init::Zeros
        } else {
            Init::Normal(1.0 / (channels as f64).sqrt())
        };
        Ok(Self {
            norm: GroupNorm::new(&mut s.sub("norm"), channels, groups)?,
            proj_in: Conv2d::with_init(
                &mut s.sub("proj_in"),
                channels,
                channels,
                1,
                1,
                0,
                Init::Normal(1.0 / (channels as f64).sqrt()),
            )?,
            ln1: LayerNorm::new(&mut s.sub("ln1"), channels)?,
            self_attn: AttentionParams::init(
                &mut s.sub("self_attn"),
                channels,
                channels,
                channels,
                channels,
                heads,
                false,
            )?,
            ln2: LayerNorm::new(&mut s.sub("ln2"), channels)?,
            cross: AttentionParams::init(
                &mut s.sub("cross"),
                channels,
                bank_dim,
                inner,
                channels,
                heads,
                zero_init,
            )?,
            ln3: LayerNorm::new(&mut s.sub("ln3"), channels)?,
            ff: FeedForward {
                up: Linear::new(&mut s.sub("ff_up"), channels, 4 * channels)?,
                down: Linear::new(&mut s.sub("ff_down"), 4 * channels, channels)?,
            },
            proj_out: Conv2d::with_init(&mut s.sub("proj_out"), channels, channels, 1, 1, 0, out_init)?,
        })
    }

    pub fn cross(&self) -> &AttentionParams {
        &self.cross
    }

    pub fn forward(&self, x: &Tensor, bank: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut t = to_tokens(&self.proj_in.forward(&self.norm.forward(x)?)?)?;
        let n = self.ln1.forward(&t)?;
        t = (&t + cross_attention(&n, &n, &self.self_attn)?)?;
        if !bank_is_empty(bank)? {
            t = (&t + cross_attention(&self.ln2.forward(&t)?, bank, &self.cross)?)?;
        }
        t = (&t + self.ff.forward(&self.ln3.forward(&t)?)?)?;
        Ok((x + self.proj_out.forward(&from_tokens(&t, h, w)?)?)?)
    }
}

/// Either conditioning block.
#[derive(Debug, Clone, Copy)]
pub enum GcBlock<'a> {
    V(&'a GCBlockV),
    FC(&'a GCBlockFC),
}

/// Applies a conditioning block to `(B, C, H, W)` features.
pub fn gcb_forward(block: GcBlock<'_>, features: &Tensor, bank_tokens: &Tensor) -> Result<Tensor> {
    match block {
        GcBlock::V(b) => b.forward(features, bank_tokens),
        GcBlock::FC(b) => b.forward(features, bank_tokens),
    }
}
