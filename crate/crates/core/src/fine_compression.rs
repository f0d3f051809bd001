//! Cross-attention compression of the coarse bank against the current
//! batch's features.
//!
//! The batch features act as queries and the bank rows as keys/values, so
//! the result has one row per batch feature regardless of the bank size.

use candle_core::{Tensor, Var};

use crate::attention::{cross_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::feature_bank::{extract_batch, CoarseFeatureBank, Extractor, ExtractorConfig, GlobalFeatureSpace};
use crate::nn::params::Scope;

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_INNER: usize = 64;

/// Features of the images in one batch (the attention queries).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFeatureSpace {
    /// `ζ × d`, row-major, same ordering as the global feature space.
    pub vectors: Vec<f32>,
    pub zeta: usize,
    pub d: usize,
    pub n_images: usize,
    pub produced_by: String,
}

impl BatchFeatureSpace {
    pub fn from_space(space: GlobalFeatureSpace) -> Self {
        Self {
            zeta: space.rows(),
            d: space.d,
            n_images: space.n_images,
            produced_by: space.fingerprint,
            vectors: space.vectors,
        }
    }

    /// `(ζ, d)` tokens in the dtype/device of `like`.
    pub fn tokens(&self, like: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.vectors.clone(), (self.zeta, self.d), like.device())?.to_dtype(like.dtype())?)
    }

    /// `(n_images, ζ/n_images, d)`: each image's own rows.
    pub fn per_image_tokens(&self, like: &Tensor) -> Result<Tensor> {
        Ok(self
            .tokens(like)?
            .reshape((self.n_images, self.zeta / self.n_images, self.d))?)
    }
}

/// Extracts the batch feature space. When `bank` is given its encoder
/// fingerprint must match `encoder`.
pub fn build_batch_space(
    batch: &Tensor,
    encoder: &Extractor,
    bank: Option<&CoarseFeatureBank>,
) -> Result<BatchFeatureSpace> {
    if let Some(b) = bank {
        if b.extractor_fingerprint != encoder.fingerprint() {
            return Err(Error::Config(format!(
                "batch encoder `{}` does not match bank encoder `{}`",
                encoder.fingerprint(),
                b.extractor_fingerprint
            )));
        }
    }
    Ok(BatchFeatureSpace::from_space(extract_batch(encoder, batch)?))
}

/// Convenience wrapper building the encoder from its config.
pub fn build_batch_space_with(
    batch: &Tensor,
    cfg: &ExtractorConfig,
    bank: Option<&CoarseFeatureBank>,
) -> Result<BatchFeatureSpace> {
    let ex = Extractor::new(cfg, batch.dim(1)?)?;
    build_batch_space(batch, &ex, bank)
}

/// Seeded parameters mapping `d → inner → d`.
pub fn init_params(s: &mut Scope, d: usize, inner: usize, heads: usize) -> Result<AttentionParams> {
    AttentionParams::init(s, d, d, inner, d, heads, false)
}

/// Fine bank rows, one per query row.
#[derive(Debug, Clone)]
pub struct FineFeatureBank {
    /// `(ζ, d)`, or `(B, ζ/B, d)` when computed per image.
    pub vectors: Tensor,
}

fn check_operands(queries: &Tensor, bank: &Tensor, p: &AttentionParams) -> Result<()> {
    let dq = *queries.dims().last().unwrap_or(&0);
    let db = *bank.dims().last().unwrap_or(&0);
    if dq != p.query_dim() {
        return Err(Error::Shape(format!(
            "batch features have dim {dq}, query projection expects {}",
            p.query_dim()
        )));
    }
    if db != p.key_dim() {
        return Err(Error::Shape(format!(
            "coarse bank has dim {db}, key/value projections expect {}",
            p.key_dim()
        )));
    }
    if p.out_dim() != dq {
        return Err(Error::Shape(format!(
            "output projection maps to {}, feature dim is {dq}",
            p.out_dim()
        )));
    }
    Ok(())
}

/// Tensor-level forward: `queries` `(ζ, d)` or `(B, n, d)`, `bank` `(ξ, d)`.
pub fn fcm_apply(queries: &Tensor, bank: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    check_operands(queries, bank, p)?;
    cross_attention(queries, bank, p)
}

pub fn fcm_forward(dbs: &BatchFeatureSpace, bank: &CoarseFeatureBank, p: &AttentionParams) -> Result<FineFeatureBank> {
    if dbs.d != bank.d {
        return Err(Error::Shape(format!("batch features d={} vs bank d={}", dbs.d, bank.d)));
    }
    let like = &p.query;
    Ok(FineFeatureBank {
        vectors: fcm_apply(&dbs.tokens(like)?, &bank.tokens(like)?, p)?,
    })
}

/// Gradients of a scalar head w.r.t. the four projection matrices.
#[derive(Debug, Clone)]
pub struct FcmGradients {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

pub fn fcm_gradients<F>(loss_head: F, queries: &Tensor, bank: &Tensor, p: &AttentionParams) -> Result<FcmGradients>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let vars = [&p.query, &p.key, &p.value, &p.output]
        .map(|t| Var::from_tensor(&t.detach()))
        .into_iter()
        .collect::<candle_core::Result<Vec<_>>>()?;
    let tracked = AttentionParams::new(
        vars[0].as_tensor().clone(),
        vars[1].as_tensor().clone(),
        vars[2].as_tensor().clone(),
        vars[3].as_tensor().clone(),
        p.heads(),
    )?;
    let out = fcm_apply(&queries.detach(), &bank.detach(), &tracked)?;
    let loss = loss_head(&out)?;
    if loss.elem_count() != 1 {
        return Err(Error::Shape(format!("loss head returned shape {:?}", loss.dims())));
    }
    let grads = loss.sum_all()?.backward()?;
    let grad = |v: &Var| -> Result<Tensor> {
        Ok(match grads.get(v.as_tensor()) {
            Some(g) => g.clone(),
            None => v.as_tensor().zeros_like()?,
        })
    };
    Ok(FcmGradients {
        query: grad(&vars[0])?,
        key: grad(&vars[1])?,
        value: grad(&vars[2])?,
        output: grad(&vars[3])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn single_key_output_ignores_queries() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], (2, 2));
        let v = t(&[2.0, 1.0, 0.0, 3.0], (2, 2));
        let b = t(&[0.5, -1.0, 1.0, 1.0], (2, 2));
        let p = AttentionParams::new(eye.clone(), eye, v.clone(), b.clone(), 1).unwrap();
        let q = t(&[1.0, 2.0, -3.0, 0.0, 9.0, 9.0], (3, 2));
        let bank = t(&[1.0, 1.0], (1, 2));
        let out: Vec<Vec<f64>> = fcm_apply(&q, &bank, &p).unwrap().to_vec2().unwrap();
        let expect: Vec<Vec<f64>> = bank.matmul(&v).unwrap().matmul(&b).unwrap().to_vec2().unwrap();
        for row in out {
            assert_eq!(row, expect[0]);
        }
    }

    #[test]
    fn identity_projections_give_convex_combination() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], (2, 2));
        let p = AttentionParams::new(eye.clone(), eye.clone(), eye.clone(), eye, 1).unwrap();
        let q = t(&[1.0, 0.0, 0.0, 2.0], (2, 2));
        let bank = t(&[1.0, 0.0, 0.0, 1.0], (2, 2));
        let out: Vec<Vec<f64>> = fcm_apply(&q, &bank, &p).unwrap().to_vec2().unwrap();
        // logits row 0: [1, 0]/√2; row 1: [0, 2]/√2
        let s = std::f64::consts::SQRT_2;
        let a = (1.0 / s).exp() / ((1.0 / s).exp() + 1.0);
        let b = (2.0 / s).exp() / ((2.0 / s).exp() + 1.0);
        assert!((out[0][0] - a).abs() < 1e-12 && (out[0][1] - (1.0 - a)).abs() < 1e-12);
        assert!((out[1][0] - (1.0 - b)).abs() < 1e-12 && (out[1][1] - b).abs() < 1e-12);
    }

    #[test]
    fn operand_mismatch_is_named() {
        let mut ps = crate::nn::params::ParamStore::new(DType::F64, &Device::Cpu, 0);
        let p = init_params(&mut Scope::new(&mut ps, "fcm", true), 4, 8, 2).unwrap();
        let q = Tensor::zeros((3, 5), DType::F64, &Device::Cpu).unwrap();
        let bank = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        let e = fcm_apply(&q, &bank, &p).unwrap_err().to_string();
        assert!(e.contains("batch features"), "{e}");
        let q = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
        let bank = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let e = fcm_apply(&q, &bank, &p).unwrap_err().to_string();
        assert!(e.contains("coarse bank"), "{e}");
    }

    #[test]
    fn constant_head_has_zero_gradients() {
        let mut ps = crate::nn::params::ParamStore::new(DType::F64, &Device::Cpu, 3);
        let p = init_params(&mut Scope::new(&mut ps, "fcm", true), 4, 4, 2).unwrap();
        let q = Tensor::ones((3, 4), DType::F64, &Device::Cpu).unwrap();
        let bank = Tensor::ones((2, 4), DType::F64, &Device::Cpu).unwrap();
        let g = fcm_gradients(|_| Ok(Tensor::new(3.0f64, &Device::Cpu)?), &q, &bank, &p).unwrap();
        for gr in [g.query, g.key, g.value, g.output] {
            assert_eq!(gr.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        }
    }

    #[test]
    fn fingerprint_mismatch_is_a_config_error() {
        let cfg = ExtractorConfig::default();
        let batch = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let bank = CoarseFeatureBank::empty(cfg.d, "other-encoder");
        assert!(matches!(
            build_batch_space_with(&batch, &cfg, Some(&bank)),
            Err(Error::Config(_))
        ));
        let ok = build_batch_space_with(&batch, &cfg, None).unwrap();
        assert_eq!(ok.zeta, 16);
    }
}
