//! Reconstruction samplers.
//!
//! Both start from pure Gaussian noise and walk a strided descending
//! timestep subsequence with deterministic (eta = 0) or stochastic DDIM
//! steps.

use candle_core::{DType, Tensor};
use rand::Rng;

use super::losses::{fine_condition, gaussian_like};
use super::trainer::CcadModel;
use crate::backbone::LatentCodec;
use crate::backbone::{Conditioning, EpsModel, Variant};
use crate::error::{Error, Result};
use crate::feature_bank::CoarseFeatureBank;
use crate::schedules::{ddim_step_to, guided_epsilon, target_forward, GuidanceConfig, NoiseSchedule, TimeStep};

fn reverse_step<R: Rng + ?Sized>(
    x: &Tensor,
    eps: &Tensor,
    ts: &[TimeStep],
    i: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let prev = ts.get(i + 1).map_or(0, |t| t.get());
    let noise = if schedule.eta() > 0.0 {
        Some(gaussian_like(x, rng)?)
    } else {
        None
    };
    Ok(ddim_step_to(x, eps, ts[i], prev, schedule, noise.as_ref())?.detach())
}

/// Latent sampling with a local condition `local` (the image, `(B, C, H, W)`)
/// and conditioning tokens `cond_tokens`, decoded through `codec`.
pub fn sample_fc<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    codec: &LatentCodec,
    local: &Tensor,
    cond_tokens: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let ts = schedule.strided_timesteps(steps)?;
    let (b, c, h, w) = local.dims4()?;
    let f = codec.factor();
    let shape = (b, codec.latent_channels(c), h / f, w / f);
    let mut z = gaussian_like(&Tensor::zeros(shape, local.dtype(), local.device())?, rng)?;
    for i in 0..ts.len() {
        let eps = model.eps(
            &z,
            &vec![ts[i]; b],
            &Conditioning {
                local: Some(local),
                bank: cond_tokens,
            },
        )?;
        z = reverse_step(&z, &eps.to_dtype(z.dtype())?, &ts, i, schedule, rng)?;
    }
    codec.decode(&z)
}

/// Pixel-space sampling guided toward `target` `(B, C, H, W)` with weight `w`.
pub fn sample_v<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    target: &Tensor,
    bank_tokens: &Tensor,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let ts = schedule.strided_timesteps(steps)?;
    let b = target.dim(0)?;
    let mut x = gaussian_like(target, rng)?;
    for i in 0..ts.len() {
        let t = ts[i];
        let eps = model
            .eps(
                &x,
                &vec![t; b],
                &Conditioning {
                    local: None,
                    bank: bank_tokens,
                },
            )?
            .to_dtype(x.dtype())?
            .detach();
        let xbar_t = target_forward(target, &eps, t, schedule)?;
        let guided = guided_epsilon(&eps, &x, &xbar_t, guidance, t, schedule)?;
        x = reverse_step(&x, &guided, &ts, i, schedule, rng)?;
    }
    Ok(x)
}

/// Reconstructs `x_test` with a trained latent-variant model.
///
/// For the feature-compressed variant the queries of the compression module
/// are the test images' own features unless `training_features` (`(B, n, d)`
/// or `(1, n, d)`) is supplied.
pub fn reconstruct_fc<R: Rng + ?Sized>(
    model: &CcadModel,
    x_test: &Tensor,
    bank: &CoarseFeatureBank,
    schedule: &NoiseSchedule,
    steps: usize,
    training_features: Option<&Tensor>,
    rng: &mut R,
) -> Result<Tensor> {
    model.check_bank(bank)?;
    let x = x_test.to_dtype(DType::F32)?;
    let tokens = bank.tokens(&x)?;
    let cond = match (model.variant(), &model.fcm) {
        (Variant::C, _) => tokens,
        (Variant::F, Some(f)) => {
            let b = x.dim(0)?;
            let queries = match training_features {
                Some(q) => {
                    let (_, n, d) = q.dims3()?;
                    q.to_dtype(DType::F32)?.broadcast_as((b, n, d))?.contiguous()?
                }
                None => f.batch_features(&x)?,
            };
            fine_condition(&queries, &tokens, &f.params)?.detach()
        }
        (v, _) => {
            return Err(Error::Config(format!(
                "latent reconstruction needs variant F or C, got {v}"
            )));
        }
    };
    let out = sample_fc(&model.denoiser, &model.codec, &x, &cond, schedule, steps, rng)?;
    Ok(out.to_dtype(x_test.dtype())?)
}

/// Reconstructs toward `target` (normally the test image itself) with a
/// trained pixel-space model.
pub fn reconstruct_v<R: Rng + ?Sized>(
    model: &CcadModel,
    target: &Tensor,
    bank: &CoarseFeatureBank,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if model.variant() != Variant::V {
        return Err(Error::Config(format!(
            "guided reconstruction needs variant V, got {}",
            model.variant()
        )));
    }
    model.check_bank(bank)?;
    let x = target.to_dtype(DType::F32)?;
    let out = sample_v(&model.denoiser, &x, &bank.tokens(&x)?, schedule, guidance, steps, rng)?;
    Ok(out.to_dtype(target.dtype())?)
}
