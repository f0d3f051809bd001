//! The two denoiser topologies: a fully trainable pixel-space UNet and a
//! latent UNet with a frozen encoder/middle, a trainable control encoder
//! and a trainable decoder.

use candle_core::Tensor;

use super::blocks::{GCBlockFC, GCBlockV, ResBlock, SelfAttention};
use super::BackboneConfig;
use crate::attention::AttentionParams;
use crate::error::Result;
use crate::nn::layers::{timestep_embedding, Conv2d, GroupNorm, Linear, Silu};
use crate::nn::ops::upsample_nearest2x;
use crate::nn::params::{ParamStore, Scope};

#[derive(Debug, Clone)]
pub(crate) struct TimeMlp {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeMlp {
    fn new(s: &mut Scope, dim: usize, tdim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            l1: Linear::new(&mut s.sub("l1"), dim, tdim)?,
            l2: Linear::new(&mut s.sub("l2"), tdim, tdim)?,
        })
    }

    fn forward(&self, ts: &[f64], like: &Tensor) -> Result<Tensor> {
        let e = timestep_embedding(ts, self.dim, like)?;
        self.l2.forward(&self.l1.forward(&e)?.apply(&Silu)?)
    }
}

#[derive(Debug, Clone)]
struct OutHead {
    norm: GroupNorm,
    conv: Conv2d,
}

impl OutHead {
    fn new(s: &mut Scope, cin: usize, cout: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut s.sub("norm"), cin, groups)?,
            conv: Conv2d::new(&mut s.sub("conv"), cin, cout, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&self.norm.forward(x)?.apply(&Silu)?)
    }
}

#[derive(Debug, Clone)]
struct VLevel {
    res: ResBlock,
    attn: Option<(SelfAttention, GCBlockV)>,
}

impl VLevel {
    fn forward(&self, x: &Tensor, temb: &Tensor, bank: &Tensor) -> Result<Tensor> {
        let mut h = self.res.forward(x, temb)?;
        if let Some((sa, gcb)) = &self.attn {
            h = gcb.forward(&sa.forward(&h)?, bank)?;
        }
        Ok(h)
    }
}

fn attn_at(cfg: &BackboneConfig, level: usize) -> bool {
    level + cfg.attention_levels >= cfg.channel_mult.len()
}

#[derive(Debug, Clone)]
pub(crate) struct UNetV {
    time: TimeMlp,
    conv_in: Conv2d,
    down: Vec<VLevel>,
    downsample: Vec<Conv2d>,
    mid: (ResBlock, SelfAttention, GCBlockV, ResBlock),
    up: Vec<VLevel>,
    upsample: Vec<Conv2d>,
    out: OutHead,
}

impl UNetV {
    pub(crate) fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let mut s = Scope::new(store, "unet", true);
        let widths = cfg.widths();
        let (b, g, tdim) = (cfg.base_width, cfg.groups, cfg.time_dim());
        let gcb = |s: &mut Scope, c: usize| {
            GCBlockV::new(s, c, cfg.bank_dim, cfg.cond_inner, cfg.heads, g, cfg.zero_init_cond)
        };
        let time = TimeMlp::new(&mut s.sub("time"), b, tdim)?;
        let conv_in = Conv2d::new(&mut s.sub("conv_in"), cfg.in_channels, b, 3, 1, 1)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cin = b;
        for (i, &c) in widths.iter().enumerate() {
            let mut ls = s.sub(&format!("down{i}"));
            let attn = if attn_at(cfg, i) {
                Some((
                    SelfAttention::new(&mut ls.sub("self_attn"), c, cfg.heads, g)?,
                    gcb(&mut ls.sub("gcb"), c)?,
                ))
            } else {
                None
            };
            down.push(VLevel {
                res: ResBlock::new(&mut ls.sub("res"), cin, c, tdim, g)?,
                attn,
            });
            if i + 1 < widths.len() {
                downsample.push(Conv2d::new(&mut ls.sub("downsample"), c, c, 3, 2, 1)?);
            }
            cin = c;
        }
        let cm = *widths.last().unwrap_or(&b);
        let mut ms = s.sub("mid");
        let mid = (
            ResBlock::new(&mut ms.sub("res1"), cm, cm, tdim, g)?,
            SelfAttention::new(&mut ms.sub("self_attn"), cm, cfg.heads, g)?,
            gcb(&mut ms.sub("gcb"), cm)?,
            ResBlock::new(&mut ms.sub("res2"), cm, cm, tdim, g)?,
        );
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut hc = cm;
        for (i, &c) in widths.iter().enumerate().rev() {
            let mut ls = s.sub(&format!("up{i}"));
            let attn = if attn_at(cfg, i) {
                Some((
                    SelfAttention::new(&mut ls.sub("self_attn"), c, cfg.heads, g)?,
                    gcb(&mut ls.sub("gcb"), c)?,
                ))
            } else {
                None
            };
            up.push(VLevel {
                res: ResBlock::new(&mut ls.sub("res"), hc + c, c, tdim, g)?,
                attn,
            });
            if i > 0 {
                upsample.push(Conv2d::new(&mut ls.sub("upsample"), c, c, 3, 1, 1)?);
            }
            hc = c;
        }
        let out = OutHead::new(&mut s.sub("out"), hc, cfg.in_channels, g)?;
        Ok(Self {
            time,
            conv_in,
            down,
            downsample,
            mid,
            up,
            upsample,
            out,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, ts: &[f64], bank: &Tensor) -> Result<Tensor> {
        let temb = self.time.forward(ts, x)?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, level) in self.down.iter().enumerate() {
            h = level.forward(&h, &temb, bank)?;
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid.0.forward(&h, &temb)?;
        h = self.mid.2.forward(&self.mid.1.forward(&h)?, bank)?;
        h = self.mid.3.forward(&h, &temb)?;
        for (j, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = level.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, bank)?;
            if let Some(us) = self.upsample.get(j) {
                h = us.forward(&upsample_nearest2x(&h)?)?;
            }
        }
        self.out.forward(&h)
    }

    pub(crate) fn gcb_cross(&self) -> Vec<&AttentionParams> {
        let mut v: Vec<&AttentionParams> = Vec::new();
        for l in self.down.iter().chain(self.up.iter()) {
            if let Some((_, g)) = &l.attn {
                v.push(g.cross());
            }
        }
        v.push(self.mid.2.cross());
        v
    }
}

#[derive(Debug, Clone)]
struct FrozenLevel {
    res: ResBlock,
    attn: Option<SelfAttention>,
}

#[derive(Debug, Clone)]
struct CondLevel {
    res: ResBlock,
    gcb: Option<GCBlockFC>,
}

impl CondLevel {
    fn forward(&self, x: &Tensor, temb: &Tensor, bank: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.gcb {
            Some(g) => g.forward(&h, bank),
            None => Ok(h),
        }
    }
}

/// Maps the local condition image down to the latent grid.
#[derive(Debug, Clone)]
struct HintEncoder {
    convs: Vec<Conv2d>,
    zero: Conv2d,
}

impl HintEncoder {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.apply(&Silu)?;
        }
        self.zero.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Gcdm {
    // frozen
    time: TimeMlp,
    conv_in: Conv2d,
    enc: Vec<FrozenLevel>,
    enc_down: Vec<Conv2d>,
    mid: (ResBlock, SelfAttention, ResBlock),
    // trainable control encoder
    hint: HintEncoder,
    ctrl_in: Conv2d,
    ctrl: Vec<CondLevel>,
    ctrl_down: Vec<Conv2d>,
    ctrl_zero: Vec<Conv2d>,
    ctrl_mid: (ResBlock, GCBlockFC),
    ctrl_mid_zero: Conv2d,
    // trainable decoder
    dec: Vec<CondLevel>,
    dec_up: Vec<Conv2d>,
    out: OutHead,
}

impl Gcdm {
    pub(crate) fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let widths = cfg.widths();
        let (b, g, tdim) = (cfg.base_width, cfg.groups, cfg.time_dim());
        let cm = *widths.last().unwrap_or(&b);

        let mut fs = Scope::new(store, "frozen", false);
        let time = TimeMlp::new(&mut fs.sub("time"), b, tdim)?;
        let conv_in = Conv2d::new(&mut fs.sub("conv_in"), cfg.in_channels, b, 3, 1, 1)?;
        let mut enc = Vec::new();
        let mut enc_down = Vec::new();
        let mut cin = b;
        for (i, &c) in widths.iter().enumerate() {
            let mut ls = fs.sub(&format!("enc{i}"));
            enc.push(FrozenLevel {
                res: ResBlock::new(&mut ls.sub("res"), cin, c, tdim, g)?,
                attn: if attn_at(cfg, i) {
                    Some(SelfAttention::new(&mut ls.sub("self_attn"), c, cfg.heads, g)?)
                } else {
                    None
                },
            });
            if i + 1 < widths.len() {
                enc_down.push(Conv2d::new(&mut ls.sub("downsample"), c, c, 3, 2, 1)?);
            }
            cin = c;
        }
        let mut ms = fs.sub("mid");
        let mid = (
            ResBlock::new(&mut ms.sub("res1"), cm, cm, tdim, g)?,
            SelfAttention::new(&mut ms.sub("self_attn"), cm, cfg.heads, g)?,
            ResBlock::new(&mut ms.sub("res2"), cm, cm, tdim, g)?,
        );

        let gcb = |s: &mut Scope, c: usize| {
            GCBlockFC::new(s, c, cfg.bank_dim, cfg.cond_inner, cfg.heads, g, cfg.zero_init_cond)
        };
        let mut cs = Scope::new(store, "control", true);
        let hint = {
            let mut hs = cs.sub("hint");
            let hw = b.min(16).max(1);
            let mut convs = vec![Conv2d::new(&mut hs.sub("conv0"), cfg.local_channels, hw, 3, 1, 1)?];
            let mut f = cfg.local_downsample;
            let mut k = 1;
            while f > 1 {
                convs.push(Conv2d::new(&mut hs.sub(&format!("conv{k}")), hw, hw, 3, 2, 1)?);
                f /= 2;
                k += 1;
            }
            HintEncoder {
                convs,
                zero: Conv2d::zeros(&mut hs.sub("zero"), hw, b, 3, 1, 1)?,
            }
        };
        let ctrl_in = Conv2d::new(&mut cs.sub("conv_in"), cfg.in_channels, b, 3, 1, 1)?;
        let mut ctrl = Vec::new();
        let mut ctrl_down = Vec::new();
        let mut ctrl_zero = Vec::new();
        let mut cin = b;
        for (i, &c) in widths.iter().enumerate() {
            let mut ls = cs.sub(&format!("enc{i}"));
            ctrl.push(CondLevel {
                res: ResBlock::new(&mut ls.sub("res"), cin, c, tdim, g)?,
                gcb: if attn_at(cfg, i) {
                    Some(gcb(&mut ls.sub("gcb"), c)?)
                } else {
                    None
                },
            });
            ctrl_zero.push(Conv2d::zeros(&mut ls.sub("zero"), c, c, 1, 1, 0)?);
            if i + 1 < widths.len() {
                ctrl_down.push(Conv2d::new(&mut ls.sub("downsample"), c, c, 3, 2, 1)?);
            }
            cin = c;
        }
        let mut cms = cs.sub("mid");
        let ctrl_mid = (
            ResBlock::new(&mut cms.sub("res"), cm, cm, tdim, g)?,
            gcb(&mut cms.sub("gcb"), cm)?,
        );
        let ctrl_mid_zero = Conv2d::zeros(&mut cms.sub("zero"), cm, cm, 1, 1, 0)?;

        let mut ds = Scope::new(store, "decoder", true);
        let mut dec = Vec::new();
        let mut dec_up = Vec::new();
        let mut hc = cm;
        for (i, &c) in widths.iter().enumerate().rev() {
            let mut ls = ds.sub(&format!("dec{i}"));
            dec.push(CondLevel {
                res: ResBlock::new(&mut ls.sub("res"), hc + c, c, tdim, g)?,
                gcb: if attn_at(cfg, i) {
                    Some(gcb(&mut ls.sub("gcb"), c)?)
                } else {
                    None
                },
            });
            if i > 0 {
                dec_up.push(Conv2d::new(&mut ls.sub("upsample"), c, c, 3, 1, 1)?);
            }
            hc = c;
        }
        let out = OutHead::new(&mut ds.sub("out"), hc, cfg.in_channels, g)?;
        Ok(Self {
            time,
            conv_in,
            enc,
            enc_down,
            mid,
            hint,
            ctrl_in,
            ctrl,
            ctrl_down,
            ctrl_zero,
            ctrl_mid,
            ctrl_mid_zero,
            dec,
            dec_up,
            out,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, ts: &[f64], local: &Tensor, bank: &Tensor) -> Result<Tensor> {
        let temb = self.time.forward(ts, x)?;

        // frozen encoder and middle
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.enc.len());
        for (i, level) in self.enc.iter().enumerate() {
            h = level.res.forward(&h, &temb)?;
            if let Some(sa) = &level.attn {
                h = sa.forward(&h)?;
            }
            skips.push(h.clone());
            if let Some(d) = self.enc_down.get(i) {
                h = d.forward(&h)?;
            }
        }
        h = self.mid.0.forward(&h, &temb)?;
        h = self.mid.2.forward(&self.mid.1.forward(&h)?, &temb)?;

        // control encoder adds zero-initialised residuals
        let mut c = (self.ctrl_in.forward(x)? + self.hint.forward(local)?)?;
        for (i, level) in self.ctrl.iter().enumerate() {
            c = level.forward(&c, &temb, bank)?;
            skips[i] = (&skips[i] + self.ctrl_zero[i].forward(&c)?)?;
            if let Some(d) = self.ctrl_down.get(i) {
                c = d.forward(&c)?;
            }
        }
        c = self.ctrl_mid.1.forward(&self.ctrl_mid.0.forward(&c, &temb)?, bank)?;
        h = (h + self.ctrl_mid_zero.forward(&c)?)?;

        for (j, level) in self.dec.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = level.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, bank)?;
            if let Some(u) = self.dec_up.get(j) {
                h = u.forward(&upsample_nearest2x(&h)?)?;
            }
        }
        self.out.forward(&h)
    }

    pub(crate) fn gcb_cross(&self) -> Vec<&AttentionParams> {
        let mut v: Vec<&AttentionParams> = self
            .ctrl
            .iter()
            .chain(self.dec.iter())
            .filter_map(|l| l.gcb.as_ref().map(|g| g.cross()))
            .collect();
        v.push(self.ctrl_mid.1.cross());
        v
    }
}
