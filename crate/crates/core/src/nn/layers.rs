use candle_core::Tensor;

use super::params::{Init, Scope};
use super::{fused, ops};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// He-normal initialised convolution (zero bias).
    pub fn new(s: &mut Scope, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::with_init(s, cin, cout, k, stride, pad, Init::Normal(std))
    }

    pub fn with_init(
        s: &mut Scope,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = s.get("weight", &[cout, cin, k, k], init)?;
        let bias = Some(s.get("bias", &[cout], Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn zeros(s: &mut Scope, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::with_init(s, cin, cout, k, stride, pad, Init::Zeros)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// Dense layer storing its weight as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &mut Scope, din: usize, dout: usize) -> Result<Self> {
        let std = (1.0 / din as f64).sqrt();
        Self::with_init(s, din, dout, Init::Normal(std))
    }

    pub fn with_init(s: &mut Scope, din: usize, dout: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[din, dout], init)?,
            bias: s.get("bias", &[dout], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(s: &mut Scope, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels).max(1);
        let groups = (1..=groups).rev().find(|g| channels % g == 0).unwrap_or(1);
        Ok(Self {
            groups,
            gamma: s.get("gamma", &[channels], Init::Ones)?,
            beta: s.get("beta", &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// `x`: (B, C, H, W).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(fused::group_norm(x, &self.gamma, &self.beta, self.groups, self.eps)?)
    }
}

/// Layer normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Ones)?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = fused::normalize_last(x, self.eps)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(fused::softmax_last(x)?)
}

/// SiLU as a module, for `tensor.apply(&Silu)`.
#[derive(Debug, Clone, Copy)]
pub struct Silu;

impl candle_core::Module for Silu {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        fused::silu(xs)
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps: `(len(t), dim)`.
pub fn timestep_embedding(ts: &[f64], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t * f).sin());
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t * f).cos());
        }
        for _ in 2 * half..dim {
            v.push(0.0);
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

/// Spatial map (B, C, H, W) → token sequence (B, H·W, C).
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Token sequence (B, H·W, C) → spatial map (B, C, H, W).
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_rows_sum_to_one_even_for_large_logits() {
        let x = Tensor::new(&[[1000.0f64, 999.0, -50.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let p: Vec<Vec<f64>> = softmax_last_dim(&x).unwrap().to_vec2().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
        assert!((p[1][0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_normalises_each_group() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu, 0);
        let mut s = Scope::new(&mut ps, "gn", true);
        let gn = GroupNorm::new(&mut s, 4, 2).unwrap();
        let x = Tensor::arange(0.0f64, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 4))
            .unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 16)).unwrap();
        let means: Vec<f64> = y.mean(1).unwrap().to_vec1().unwrap();
        assert!(means.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn token_round_trip() {
        let x = Tensor::arange(0.0f32, 24.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 3, 4))
            .unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.dims(), &[1, 12, 2]);
        let back = from_tokens(&t, 3, 4).unwrap();
        let a: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
