//! Adam with either coupled (L2) or decoupled weight decay, plus global
//! gradient-norm clipping.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, cfg: OptimizerConfig) -> Result<Self> {
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::param("learning_rate", "must be finite and non-negative"));
        }
        if !(cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()) {
            return Err(Error::param("weight_decay", "must be finite and non-negative"));
        }
        let m = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { cfg, vars, m, v, t: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Global L2 norm of the gradients of the managed variables.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for var in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.t as usize,
                diagnostic: format!("non-finite gradient norm {norm}"),
            });
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, var) in self.vars.iter().enumerate() {
            let theta = var.as_tensor().detach();
            let mut g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach().affine(scale, 0.0)?,
                None => theta.zeros_like()?,
            };
            if c.kind == OptimizerKind::Adam && c.weight_decay > 0.0 {
                g = (g + theta.affine(c.weight_decay, 0.0)?)?;
            }
            self.m[i] = (self.m[i].affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            self.v[i] = (self.v[i].affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            if c.lr == 0.0 {
                continue;
            }
            let m_hat = self.m[i].affine(1.0 / bc1, 0.0)?;
            let v_hat = self.v[i].affine(1.0 / bc2, 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?.affine(c.lr, 0.0)?;
            let mut next = (&theta - update)?;
            if c.kind == OptimizerKind::AdamW && c.weight_decay > 0.0 {
                next = (next - theta.affine(c.lr * c.weight_decay, 0.0)?)?;
            }
            var.set(&next)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn quadratic_step(kind: OptimizerKind, wd: f64) -> f64 {
        let x = Var::new(&[2.0f64], &Device::Cpu).unwrap();
        let mut cfg = OptimizerConfig::new(kind, 0.1, wd);
        cfg.clip_norm = None;
        let mut opt = Optimizer::new(vec![x.clone()], cfg).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        x.as_tensor().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g)
        assert!((quadratic_step(OptimizerKind::Adam, 0.0) - 1.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_shrinks_separately() {
        let w = quadratic_step(OptimizerKind::AdamW, 0.5);
        assert!((w - (1.9 - 0.1 * 0.5 * 2.0)).abs() < 1e-7);
        // coupled decay only changes the gradient magnitude, not the sign
        assert!((quadratic_step(OptimizerKind::Adam, 0.5) - 1.9).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let x = Var::new(&[0.3f32, -1.7], &Device::Cpu).unwrap();
        let before = x.as_tensor().to_vec1::<f32>().unwrap();
        let mut opt = Optimizer::new(vec![x.clone()], OptimizerConfig::new(OptimizerKind::AdamW, 0.0, 0.05)).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(before, x.as_tensor().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let x = Var::new(&[100.0f64, 0.0], &Device::Cpu).unwrap();
        let opt = Optimizer::new(vec![x.clone()], OptimizerConfig::new(OptimizerKind::Adam, 0.1, 0.0)).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert!((opt.grad_norm(&g).unwrap() - 200.0).abs() < 1e-9);
    }
}
