//! Noise schedules, forward diffusion and DDIM-style reverse steps.
//!
//! Timesteps are exposed as `t ∈ [1, T]` through [`TimeStep`]; internally the
//! tables are indexed from zero, so `alpha_bar(t)` reads `alpha_bar[t - 1]`.
//! The boundary value `ᾱ_0` is defined as 1, which makes the last reverse
//! step land on a clean sample.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the beta ramp. Only the linear ramp is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BetaKind {
    #[default]
    Linear,
}

/// A diffusion timestep in `[1, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeStep(usize);

impl TimeStep {
    pub fn new(t: usize, steps: usize) -> Result<Self> {
        if t == 0 || t > steps {
            return Err(Error::param("t", format!("{t} outside [1, {steps}]")));
        }
        Ok(TimeStep(t))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Zero-based index into the schedule tables.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

/// Guidance weight `w` of the target-guided epsilon correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    w: f64,
}

impl GuidanceConfig {
    pub fn new(w: f64) -> Result<Self> {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::param(
                "w",
                format!("guidance weight must be finite and >= 0, got {w}"),
            ));
        }
        Ok(Self { w })
    }

    pub fn w(&self) -> f64 {
        self.w
    }
}

/// The β/α/ᾱ tables plus the stochasticity knob `eta` that sets σ_t.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    eta: f64,
}

impl NoiseSchedule {
    /// Builds a schedule whose betas ramp from `beta_start` to `beta_end`
    /// (both inclusive) over `steps` entries.
    pub fn make(steps: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("T", "step count must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end < 1.0) || beta_end < beta_start {
            return Err(Error::param(
                "beta_end",
                format!("{beta_end} must satisfy beta_start <= beta_end < 1"),
            ));
        }
        let betas = match kind {
            BetaKind::Linear => {
                if steps == 1 {
                    vec![beta_start]
                } else {
                    let span = beta_end - beta_start;
                    (0..steps)
                        .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from an explicit beta sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("T", "step count must be >= 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param("beta", format!("{b} not in (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            eta: 0.0,
        })
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::param("eta", format!("{eta} must be finite and >= 0")));
        }
        self.eta = eta;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn timestep(&self, t: usize) -> Result<TimeStep> {
        TimeStep::new(t, self.steps())
    }

    pub fn alpha_bar(&self, t: TimeStep) -> f64 {
        self.alpha_bars[t.index()]
    }

    /// ᾱ at a raw external index, with ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// σ for a reverse step from `t` to `prev < t`.
    pub fn sigma_between(&self, t: usize, prev: usize) -> f64 {
        if self.eta == 0.0 {
            return 0.0;
        }
        let ab_t = self.alpha_bar_at(t);
        let ab_prev = self.alpha_bar_at(prev);
        self.eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    }

    pub fn sigma(&self, t: TimeStep) -> f64 {
        self.sigma_between(t.get(), t.get() - 1)
    }

    /// `n` timesteps spread evenly over `[1, T]`, in descending order,
    /// always starting at `T` and ending at 1 (for `n >= 2`).
    pub fn strided_timesteps(&self, n: usize) -> Result<Vec<TimeStep>> {
        let steps = self.steps();
        if n == 0 || n > steps {
            return Err(Error::param(
                "steps",
                format!("inference steps {n} must lie in [1, {steps}]"),
            ));
        }
        if n == 1 {
            return Ok(vec![TimeStep(steps)]);
        }
        let mut ts: Vec<TimeStep> = (0..n).map(|i| TimeStep(1 + (i * (steps - 1)) / (n - 1))).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// Free-function form of [`NoiseSchedule::make`].
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<NoiseSchedule> {
    NoiseSchedule::make(steps, beta_start, beta_end, kind)
}

pub(crate) fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_diffuse(x0: &Tensor, t: TimeStep, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape("forward_diffuse eps vs x0", x0, eps)?;
    let ab = s.alpha_bar(t);
    Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Per-sample coefficients for a batch whose leading axis indexes samples.
fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    let t = Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?;
    Ok(t)
}

/// Batched forward diffusion with one timestep per sample (axis 0).
pub fn forward_diffuse_batch(x0: &Tensor, ts: &[TimeStep], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape("forward_diffuse eps vs x0", x0, eps)?;
    if x0.rank() == 0 || x0.dim(0)? != ts.len() {
        return Err(Error::Shape(format!(
            "batch of {:?} needs one timestep per sample, got {}",
            x0.dims(),
            ts.len()
        )));
    }
    let sa: Vec<f64> = ts.iter().map(|t| s.alpha_bar(*t).sqrt()).collect();
    let sb: Vec<f64> = ts.iter().map(|t| (1.0 - s.alpha_bar(*t)).sqrt()).collect();
    let a = per_sample(&sa, x0)?;
    let b = per_sample(&sb, x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// One reverse step from `t` to `t − 1`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: TimeStep,
    s: &NoiseSchedule,
    fresh_noise: &Tensor,
) -> Result<Tensor> {
    ddim_step_to(x_t, eps_hat, t, t.get() - 1, s, Some(fresh_noise))
}

/// One reverse step from `t` to an arbitrary earlier index `prev` (0 means
/// the clean sample), as used by strided sampling.
pub fn ddim_step_to(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: TimeStep,
    prev: usize,
    s: &NoiseSchedule,
    fresh_noise: Option<&Tensor>,
) -> Result<Tensor> {
    check_same_shape("ddim_step eps_hat vs x_t", x_t, eps_hat)?;
    if prev >= t.get() {
        return Err(Error::param("prev", format!("{prev} must be below t={}", t.get())));
    }
    let ab_t = s.alpha_bar(t);
    let ab_prev = s.alpha_bar_at(prev);
    let sigma = s.sigma_between(t.get(), prev);
    let radicand = 1.0 - ab_prev - sigma * sigma;
    if radicand < 0.0 {
        return Err(Error::Schedule(format!(
            "sigma_t^2 = {} exceeds 1 - alpha_bar_prev = {} at t={}",
            sigma * sigma,
            1.0 - ab_prev,
            t.get()
        )));
    }
    // x0 prediction, then the direction term pointing back to x_prev.
    let x0_pred = (x_t - eps_hat.affine((1.0 - ab_t).sqrt(), 0.0)?)?.affine(1.0 / ab_t.sqrt(), 0.0)?;
    let mut out = (x0_pred.affine(ab_prev.sqrt(), 0.0)? + eps_hat.affine(radicand.sqrt(), 0.0)?)?;
    if sigma > 0.0 {
        let noise =
            fresh_noise.ok_or_else(|| Error::Config("stochastic step (eta > 0) requires fresh noise".into()))?;
        check_same_shape("ddim_step fresh_noise vs x_t", x_t, noise)?;
        out = (out + noise.affine(sigma, 0.0)?)?;
    }
    Ok(out)
}

/// Target-guided epsilon: `eps_uncond − w·√(1−ᾱ_t)·(xbar_t − x_t)`.
pub fn guided_epsilon(
    eps_uncond: &Tensor,
    x_t: &Tensor,
    xbar_t: &Tensor,
    g: &GuidanceConfig,
    t: TimeStep,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape("guided_epsilon x_t vs eps", eps_uncond, x_t)?;
    check_same_shape("guided_epsilon xbar_t vs eps", eps_uncond, xbar_t)?;
    if g.w() == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let scale = g.w() * (1.0 - s.alpha_bar(t)).sqrt();
    Ok((eps_uncond - (xbar_t - x_t)?.affine(scale, 0.0)?)?)
}

/// Noised target: `√ᾱ_t·xbar0 + √(1−ᾱ_t)·eps_pred`.
pub fn target_forward(xbar0: &Tensor, eps_pred: &Tensor, t: TimeStep, s: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape("target_forward eps_pred vs xbar0", xbar0, eps_pred)?;
    forward_diffuse(xbar0, t, eps_pred, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1, BetaKind::Linear).unwrap();
        assert_eq!(s.alpha_bars().len(), 1);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule_hand_product() {
        let s = make_schedule(2, 0.1, 0.2, BetaKind::Linear).unwrap();
        assert!((s.betas()[0] - 0.1).abs() < 1e-15);
        assert!((s.betas()[1] - 0.2).abs() < 1e-15);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn thousand_step_schedule_matches_log_space_sum() {
        let s = make_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let ab = s.alpha_bars();
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab[999] < 1e-4);
        // independent log-space accumulation of the same betas
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((ab[999].ln() - log_sum).abs() < 1e-9);
    }

    #[test]
    fn invalid_bounds_name_the_field() {
        let e = make_schedule(0, 0.1, 0.2, BetaKind::Linear).unwrap_err();
        assert!(matches!(e, Error::Param { field: "T", .. }));
        let e = make_schedule(5, 0.0, 0.2, BetaKind::Linear).unwrap_err();
        assert!(matches!(
            e,
            Error::Param {
                field: "beta_start",
                ..
            }
        ));
        let e = make_schedule(5, 0.3, 0.2, BetaKind::Linear).unwrap_err();
        assert!(matches!(e, Error::Param { field: "beta_end", .. }));
        let e = make_schedule(5, 0.3, 1.0, BetaKind::Linear).unwrap_err();
        assert!(matches!(e, Error::Param { field: "beta_end", .. }));
    }

    #[test]
    fn timestep_mapping_is_one_based() {
        let s = make_schedule(3, 0.1, 0.3, BetaKind::Linear).unwrap();
        assert!(s.timestep(0).is_err());
        assert!(s.timestep(4).is_err());
        let t = s.timestep(1).unwrap();
        assert_eq!(t.index(), 0);
        assert_eq!(s.alpha_bar(t), s.alpha_bars()[0]);
        assert_eq!(s.alpha_bar_at(0), 1.0);
        assert_eq!(s.alpha_bar_at(3), s.alpha_bars()[2]);
    }

    #[test]
    fn eta_zero_gives_zero_sigma() {
        let s = make_schedule(50, 1e-3, 0.05, BetaKind::Linear).unwrap();
        for t in 1..=50 {
            assert_eq!(s.sigma(s.timestep(t).unwrap()), 0.0);
        }
    }

    #[test]
    fn strided_timesteps_span_the_range() {
        let s = make_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let ts = s.strided_timesteps(10).unwrap();
        assert_eq!(ts.len(), 10);
        assert_eq!(ts[0].get(), 1000);
        assert_eq!(ts[9].get(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(s.strided_timesteps(1001).is_err());
        assert_eq!(s.strided_timesteps(1).unwrap()[0].get(), 1000);
    }

    #[test]
    fn forward_diffuse_degenerate_and_direct() {
        // ᾱ_t is as close to 1 as representable betas allow
        let s = NoiseSchedule::from_betas(vec![1e-300]).unwrap();
        let x0 = t1(&[0.3, -1.2, 2.0]);
        let eps = t1(&[5.0, 5.0, -5.0]);
        let out = forward_diffuse(&x0, s.timestep(1).unwrap(), &eps, &s).unwrap();
        assert_eq!(vals(&out), vals(&x0));

        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let out = forward_diffuse(&t1(&[0.0; 4]), s.timestep(1).unwrap(), &t1(&[1.0; 4]), &s).unwrap();
        for v in vals(&out) {
            assert!((v - 0.866025).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_diffuse_matches_one_liner_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = make_schedule(5, 0.05, 0.3, BetaKind::Linear).unwrap();
        let x0: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
        for t in 1..=5 {
            let out = forward_diffuse(&t1(&x0), s.timestep(t).unwrap(), &t1(&eps), &s).unwrap();
            let ab: f64 = (0..t).map(|i| 1.0 - (0.05 + 0.25 * i as f64 / 4.0)).product();
            for ((o, x), e) in vals(&out).iter().zip(&x0).zip(&eps) {
                assert!((o - (ab.sqrt() * x + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_diffuse_rejects_shape_mismatch() {
        let s = make_schedule(3, 0.1, 0.3, BetaKind::Linear).unwrap();
        let e = forward_diffuse(&t1(&[1.0, 2.0]), s.timestep(1).unwrap(), &t1(&[1.0]), &s).unwrap_err();
        assert!(matches!(e, Error::Shape(_)));
    }

    #[test]
    fn ddim_perfect_denoiser_recovers_x0() {
        let s = make_schedule(10, 1e-3, 0.1, BetaKind::Linear).unwrap();
        let x0 = t1(&[0.5, -0.25, 1.0]);
        let eps = t1(&[0.3, 1.1, -0.7]);
        let t = s.timestep(1).unwrap();
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let out = ddim_step(&xt, &eps, t, &s, &t1(&[9.0; 3])).unwrap();
        for (a, b) in vals(&out).iter().zip(vals(&x0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_zero_prediction_scales_input() {
        let s = make_schedule(10, 1e-3, 0.1, BetaKind::Linear).unwrap();
        let x = t1(&[0.5, -2.0, 3.0]);
        let zero = t1(&[0.0; 3]);
        for t in 1..=10 {
            let ts = s.timestep(t).unwrap();
            let out = ddim_step(&x, &zero, ts, &s, &zero).unwrap();
            let k = (s.alpha_bar_at(t - 1) / s.alpha_bar_at(t)).sqrt();
            for (a, b) in vals(&out).iter().zip(vals(&x)) {
                assert!((a - k * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddim_scalar_hand_case() {
        // ᾱ_{t-1} = 0.8, ᾱ_t = 0.5  ⇒ betas 0.2 and 0.375
        let s = NoiseSchedule::from_betas(vec![0.2, 0.375]).unwrap();
        let out = ddim_step(&t1(&[1.0]), &t1(&[0.5]), s.timestep(2).unwrap(), &s, &t1(&[0.0])).unwrap();
        let x0_hat = (1.0 - 0.5f64.sqrt() * 0.5) / 0.5f64.sqrt();
        let expected = 0.8f64.sqrt() * x0_hat + 0.2f64.sqrt() * 0.5;
        assert!((vals(&out)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn ddim_negative_radicand_is_schedule_error() {
        let s = make_schedule(10, 0.1, 0.5, BetaKind::Linear)
            .unwrap()
            .with_eta(5.0)
            .unwrap();
        let x = t1(&[0.0]);
        let e = ddim_step(&x, &x, s.timestep(5).unwrap(), &s, &x).unwrap_err();
        assert!(matches!(e, Error::Schedule(_)));
    }

    #[test]
    fn ddim_eta_zero_ignores_noise_bitwise() {
        let s = make_schedule(20, 1e-3, 0.1, BetaKind::Linear).unwrap();
        let x = t1(&[0.1, 0.2, -0.3]);
        let e = t1(&[0.4, -0.5, 0.6]);
        let t = s.timestep(7).unwrap();
        let a = ddim_step(&x, &e, t, &s, &t1(&[1.0, 2.0, 3.0])).unwrap();
        let b = ddim_step(&x, &e, t, &s, &t1(&[-7.0, 0.5, 11.0])).unwrap();
        let (a, b) = (vals(&a), vals(&b));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn guided_epsilon_identities() {
        let s = make_schedule(10, 1e-3, 0.1, BetaKind::Linear).unwrap();
        let t = s.timestep(4).unwrap();
        let eps = t1(&[0.1, -0.2, 0.3]);
        let x = t1(&[1.0, 2.0, 3.0]);
        let xbar = t1(&[-1.0, 0.0, 4.0]);
        let g0 = GuidanceConfig::new(0.0).unwrap();
        assert_eq!(vals(&guided_epsilon(&eps, &x, &xbar, &g0, t, &s).unwrap()), vals(&eps));
        let g = GuidanceConfig::new(3.5).unwrap();
        assert_eq!(vals(&guided_epsilon(&eps, &x, &x, &g, t, &s).unwrap()), vals(&eps));
        assert!(GuidanceConfig::new(-1.0).is_err());
        assert!(GuidanceConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn guided_epsilon_scalar_check() {
        // ᾱ_t = 0.36 ⇒ √(1−ᾱ_t) = 0.8; w = 2 ⇒ correction 1.6
        let s = NoiseSchedule::from_betas(vec![0.64]).unwrap();
        let t = s.timestep(1).unwrap();
        let eps = t1(&[0.5, -0.5]);
        let x = t1(&[0.0, 1.0]);
        let xbar = t1(&[1.0, 2.0]);
        let g = GuidanceConfig::new(2.0).unwrap();
        let out = vals(&guided_epsilon(&eps, &x, &xbar, &g, t, &s).unwrap());
        assert!((out[0] - (0.5 - 1.6)).abs() < 1e-12);
        assert!((out[1] - (-0.5 - 1.6)).abs() < 1e-12);
    }

    #[test]
    fn target_forward_cases() {
        let s = NoiseSchedule::from_betas(vec![1e-300]).unwrap();
        let xb = t1(&[0.7, -0.1]);
        let out = target_forward(&xb, &t1(&[3.0, 3.0]), s.timestep(1).unwrap(), &s).unwrap();
        assert_eq!(vals(&out), vals(&xb));
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let out = target_forward(&xb, &t1(&[0.0, 0.0]), s.timestep(1).unwrap(), &s).unwrap();
        assert!((vals(&out)[0] - 0.35).abs() < 1e-12);
        assert!((vals(&out)[1] + 0.05).abs() < 1e-12);
    }

    #[test]
    fn guidance_with_exact_denoiser_reproduces_unguided_trajectory() {
        // T = 3, perfect ε derived from the true x0 at every step.
        let s = make_schedule(3, 0.1, 0.3, BetaKind::Linear).unwrap();
        let x0 = 0.6f64;
        let g = GuidanceConfig::new(1.7).unwrap();
        let perfect = |x: f64, t: usize| (x - s.alpha_bar_at(t).sqrt() * x0) / (1.0 - s.alpha_bar_at(t)).sqrt();
        let mut guided = 0.9f64;
        let mut plain = 0.9f64;
        for t in (1..=3).rev() {
            let ts = s.timestep(t).unwrap();
            let eps = t1(&[perfect(guided, t)]);
            let xg = t1(&[guided]);
            let xbar_t = target_forward(&t1(&[x0]), &eps, ts, &s).unwrap();
            let eg = guided_epsilon(&eps, &xg, &xbar_t, &g, ts, &s).unwrap();
            guided = vals(&ddim_step(&xg, &eg, ts, &s, &t1(&[0.0])).unwrap())[0];

            // closed form of the unguided deterministic step
            let e = perfect(plain, t);
            let (ab, abp) = (s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
            plain = abp.sqrt() * (plain - (1.0 - ab).sqrt() * e) / ab.sqrt() + (1.0 - abp).sqrt() * e;
            assert!((guided - plain).abs() < 1e-12);
        }
        assert!((plain - x0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..400, a in 1e-5f64..0.2, span in 0.0f64..0.5) {
            let b = (a + span).min(0.999);
            let s = make_schedule(steps, a, b, BetaKind::Linear).unwrap();
            let ab = s.alpha_bars();
            prop_assert_eq!(ab.len(), steps);
            prop_assert!(ab.iter().all(|v| *v > 0.0 && *v < 1.0));
            prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
            for i in 1..steps {
                prop_assert!((ab[i] - ab[i - 1] * s.alphas()[i]).abs() <= 1e-15);
            }
            for (al, be) in s.alphas().iter().zip(s.betas()) {
                prop_assert_eq!(*al, 1.0 - be);
            }
        }

        #[test]
        fn round_trip_predicted_x0(t in 1usize..=200, x0 in -3.0f64..3.0, e in -3.0f64..3.0) {
            let s = make_schedule(200, 1e-4, 0.02, BetaKind::Linear).unwrap();
            let ts = s.timestep(t).unwrap();
            let xt = vals(&forward_diffuse(&t1(&[x0]), ts, &t1(&[e]), &s).unwrap())[0];
            let ab = s.alpha_bar(ts);
            let rec = (xt - (1.0 - ab).sqrt() * e) / ab.sqrt();
            prop_assert!((rec - x0).abs() < 1e-6);
        }

        #[test]
        fn guided_epsilon_affine_in_w(w1 in 0.0f64..5.0, w2 in 0.0f64..5.0, t in 1usize..=50) {
            let s = make_schedule(50, 1e-3, 0.05, BetaKind::Linear).unwrap();
            let ts = s.timestep(t).unwrap();
            let eps = t1(&[0.3, -1.0, 2.0]);
            let x = t1(&[0.5, 0.1, -0.4]);
            let xb = t1(&[-0.2, 0.9, 1.3]);
            let r = |w: f64| vals(&guided_epsilon(&eps, &x, &xb, &GuidanceConfig::new(w).unwrap(), ts, &s).unwrap());
            let (a, b, c) = (r(w1), r(w2), r(w1 + w2));
            for i in 0..3 {
                prop_assert!((a[i] + b[i] - vals(&eps)[i] - c[i]).abs() < 1e-9);
            }
        }
    }
}
