//! Noise-prediction objectives.
//!
//! Every objective samples `t ∼ U{1..T}` per sample and `ε ∼ N(0, I)`,
//! diffuses the clean input to `x_t`, and takes the mean squared error
//! between `ε` and the model's prediction. They differ only in what the
//! model is conditioned on.

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::AttentionParams;
use crate::backbone::{Conditioning, EpsModel, Variant};
use crate::error::{Error, Result};
use crate::fine_compression::fcm_apply;
use crate::schedules::{forward_diffuse_batch, NoiseSchedule, TimeStep};

/// Standard-normal tensor with the shape and dtype of `like`.
pub fn gaussian_like<R: Rng + ?Sized>(like: &Tensor, rng: &mut R) -> Result<Tensor> {
    let v: Vec<f32> = (0..like.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, like.dims(), &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// The random draws of one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub timesteps: Vec<TimeStep>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(x0: &Tensor, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let b = x0.dim(0)?;
        let steps = schedule.steps();
        let timesteps = (0..b)
            .map(|_| TimeStep::new(rng.random_range(1..=steps), steps))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            timesteps,
            eps: gaussian_like(x0, rng)?,
        })
    }
}

/// `mean((ε − ε̂(x_t, t, cond))²)` for fixed draws.
pub fn eps_mse(
    model: &dyn EpsModel,
    x0: &Tensor,
    cond: &Conditioning<'_>,
    schedule: &NoiseSchedule,
    draw: &NoiseDraw,
) -> Result<Tensor> {
    let x_t = forward_diffuse_batch(x0, &draw.timesteps, &draw.eps, schedule)?;
    let pred = model.eps(&x_t, &draw.timesteps, cond)?;
    if pred.dims() != x0.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs input {:?}",
            pred.dims(),
            x0.dims()
        )));
    }
    let diff = (pred.to_dtype(x0.dtype())? - &draw.eps)?;
    Ok(diff.sqr()?.mean_all()?)
}

fn require_bank(bank: Option<&Tensor>) -> Result<&Tensor> {
    bank.ok_or_else(|| Error::Config("bank required: the conditioned objectives need a coarse feature bank".into()))
}

fn require_variant(model: &dyn EpsModel, want: Variant) -> Result<()> {
    if model.variant() != want {
        return Err(Error::Config(format!(
            "objective for variant {want} called with a variant {} model",
            model.variant()
        )));
    }
    Ok(())
}

/// Unconditional objective: the bank condition is an empty token set and
/// no local condition is given.
pub fn loss_base<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    x0: &Tensor,
    bank_dim: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let empty = Tensor::zeros((0, bank_dim), x0.dtype(), x0.device())?;
    let draw = NoiseDraw::sample(x0, schedule, rng)?;
    eps_mse(
        model,
        x0,
        &Conditioning {
            local: None,
            bank: &empty,
        },
        schedule,
        &draw,
    )
}

/// Latent objective conditioned on the image and on the fine bank that the
/// compression module derives from the batch features and the coarse bank.
/// `batch_features` is `(B, n, d)`: one query set per sample.
#[allow(clippy::too_many_arguments)]
pub fn loss_ccad_f<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    z0: &Tensor,
    local: &Tensor,
    batch_features: &Tensor,
    bank: Option<&Tensor>,
    fcm: &AttentionParams,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    require_variant(model, Variant::F)?;
    let bank = require_bank(bank)?;
    let fine = fine_condition(batch_features, bank, fcm)?;
    let draw = NoiseDraw::sample(z0, schedule, rng)?;
    eps_mse(
        model,
        z0,
        &Conditioning {
            local: Some(local),
            bank: &fine,
        },
        schedule,
        &draw,
    )
}

/// The conditioning tokens of the feature-compressed variant. An empty
/// coarse bank yields an empty fine bank (the conditioning blocks then act
/// as identities).
pub fn fine_condition(batch_features: &Tensor, bank: &Tensor, fcm: &AttentionParams) -> Result<Tensor> {
    if bank.dim(0)? == 0 {
        let d = *batch_features.dims().last().unwrap_or(&0);
        return Ok(Tensor::zeros((0, d), batch_features.dtype(), batch_features.device())?);
    }
    fcm_apply(batch_features, &bank.to_dtype(fcm.query.dtype())?, fcm)
}

/// Latent objective conditioned on the image and directly on the coarse bank.
pub fn loss_ccad_c<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    z0: &Tensor,
    local: &Tensor,
    bank: Option<&Tensor>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    require_variant(model, Variant::C)?;
    let bank = require_bank(bank)?;
    let draw = NoiseDraw::sample(z0, schedule, rng)?;
    eps_mse(
        model,
        z0,
        &Conditioning {
            local: Some(local),
            bank,
        },
        schedule,
        &draw,
    )
}

/// Pixel-space objective conditioned on the coarse bank.
pub fn loss_ccad_v<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    x0: &Tensor,
    bank: Option<&Tensor>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    require_variant(model, Variant::V)?;
    let bank = require_bank(bank)?;
    let draw = NoiseDraw::sample(x0, schedule, rng)?;
    eps_mse(model, x0, &Conditioning { local: None, bank }, schedule, &draw)
}

#[cfg(test)]
pub(crate) mod mocks {
    use std::cell::RefCell;

    use super::*;
    use crate::schedules::NoiseSchedule;

    /// Recovers the exact noise from `x_t` given the clean input it was
    /// built from (a perfect predictor for that input).
    pub struct Oracle {
        pub variant: Variant,
        pub x0: Tensor,
        pub schedule: NoiseSchedule,
    }

    impl EpsModel for Oracle {
        fn variant(&self) -> Variant {
            self.variant
        }

        fn eps(&self, x_t: &Tensor, ts: &[TimeStep], _c: &Conditioning<'_>) -> Result<Tensor> {
            let mut rows = Vec::new();
            for (i, t) in ts.iter().enumerate() {
                let ab = self.schedule.alpha_bar(*t);
                let xt = x_t.get(i)?;
                let x0 = self.x0.get(i)?;
                rows.push(((xt - x0.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0))?);
            }
            Ok(Tensor::stack(&rows, 0)?)
        }
    }

    /// Always predicts zero.
    pub struct Zero(pub Variant);

    impl EpsModel for Zero {
        fn variant(&self) -> Variant {
            self.0
        }

        fn eps(&self, x_t: &Tensor, _ts: &[TimeStep], _c: &Conditioning<'_>) -> Result<Tensor> {
            Ok(x_t.zeros_like()?)
        }
    }

    /// Records the bank tokens it was conditioned on, predicts zero.
    pub struct Spy {
        pub variant: Variant,
        pub seen: RefCell<Vec<Vec<usize>>>,
    }

    impl EpsModel for Spy {
        fn variant(&self) -> Variant {
            self.variant
        }

        fn eps(&self, x_t: &Tensor, _ts: &[TimeStep], c: &Conditioning<'_>) -> Result<Tensor> {
            self.seen.borrow_mut().push(c.bank.dims().to_vec());
            Ok(x_t.zeros_like()?)
        }
    }
}
