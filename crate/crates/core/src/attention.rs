//! Multi-head (cross-)attention with explicit projection matrices.
//!
//! Queries come from one token set, keys and values from another:
//! `Q = X_q·W_query`, `K = X_kv·W_key`, `V = X_kv·W_value`, then per head
//! `softmax(Q_h·K_hᵀ / √d_head)·V_h`, concatenated and mapped by `W_out`.
//! No biases.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::layers::softmax_last_dim;
use crate::nn::params::{Init, Scope};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// `(d_query, inner)`
    pub query: Tensor,
    /// `(d_kv, inner)`
    pub key: Tensor,
    /// `(d_kv, inner)`
    pub value: Tensor,
    /// `(inner, d_out)`
    pub output: Tensor,
    heads: usize,
}

impl AttentionParams {
    pub fn new(query: Tensor, key: Tensor, value: Tensor, output: Tensor, heads: usize) -> Result<Self> {
        let (dq, inner) = query.dims2()?;
        let (dk, ik) = key.dims2()?;
        let (dv, iv) = value.dims2()?;
        let (io, _) = output.dims2()?;
        if ik != inner || iv != inner || io != inner {
            return Err(Error::Shape(format!(
                "attention inner dims disagree: query {inner}, key {ik}, value {iv}, output {io}"
            )));
        }
        if dk != dv {
            return Err(Error::Shape(format!("key dim {dk} != value dim {dv}")));
        }
        if heads == 0 || inner % heads != 0 {
            return Err(Error::param(
                "heads",
                format!("inner dim {inner} not divisible by {heads} heads"),
            ));
        }
        let _ = dq;
        Ok(Self {
            query,
            key,
            value,
            output,
            heads,
        })
    }

    /// Seeded scaled-normal initialisation (std `1/√fan_in`); the output
    /// projection can start at zero.
    pub fn init(
        s: &mut Scope,
        d_query: usize,
        d_kv: usize,
        inner: usize,
        d_out: usize,
        heads: usize,
        zero_output: bool,
    ) -> Result<Self> {
        let q = s.get("query", &[d_query, inner], Init::Normal(1.0 / (d_query as f64).sqrt()))?;
        let k = s.get("key", &[d_kv, inner], Init::Normal(1.0 / (d_kv as f64).sqrt()))?;
        let v = s.get("value", &[d_kv, inner], Init::Normal(1.0 / (d_kv as f64).sqrt()))?;
        let o_init = if zero_output {
            Init::Zeros
        } else {
            Init::Normal(1.0 / (inner as f64).sqrt())
        };
        let o = s.get("output", &[inner, d_out], o_init)?;
        Self::new(q, k, v, o, heads)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn inner_dim(&self) -> usize {
        self.query.dims()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.inner_dim() / self.heads
    }

    pub fn query_dim(&self) -> usize {
        self.query.dims()[0]
    }

    pub fn key_dim(&self) -> usize {
        self.key.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.output.dims()[1]
    }
}

/// Lifts to rank 3; returns whether the input was unbatched.
fn batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        2 => Ok((x.unsqueeze(0)?, true)),
        3 => Ok((x.clone(), false)),
        r => Err(Error::Shape(format!(
            "attention expects rank 2 or 3 tokens, got rank {r}"
        ))),
    }
}

/// (B, n, inner) → (B, heads, n, d_head)
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, inner) = x.dims3()?;
    Ok(x.reshape((b, n, heads, inner / heads))?.transpose(1, 2)?.contiguous()?)
}

fn projections(q_in: &Tensor, kv_in: &Tensor, p: &AttentionParams) -> Result<(Tensor, Tensor, Tensor, bool)> {
    let (q3, unbatched) = batched(q_in)?;
    let (kv3, _) = batched(kv_in)?;
    let dq = q3.dim(2)?;
    let dkv = kv3.dim(2)?;
    if dq != p.query_dim() {
        return Err(Error::Shape(format!(
            "query tokens have dim {dq}, W_query expects {}",
            p.query_dim()
        )));
    }
    if dkv != p.key_dim() {
        return Err(Error::Shape(format!(
            "key/value tokens have dim {dkv}, W_key expects {}",
            p.key_dim()
        )));
    }
    if kv3.dim(1)? == 0 {
        return Err(Error::Shape("attention over an empty key set".into()));
    }
    let b = q3.dim(0)?;
    let kvb = kv3.dim(0)?;
    if kvb != b && kvb != 1 {
        return Err(Error::Shape(format!("query batch {b} vs key/value batch {kvb}")));
    }
    let q = split_heads(&q3.broadcast_matmul(&p.query)?, p.heads)?;
    let mut k = split_heads(&kv3.broadcast_matmul(&p.key)?, p.heads)?;
    let mut v = split_heads(&kv3.broadcast_matmul(&p.value)?, p.heads)?;
    if kvb != b {
        let (_, h, n, dh) = k.dims4()?;
        k = k.broadcast_as((b, h, n, dh))?.contiguous()?;
        v = v.broadcast_as((b, h, n, dh))?.contiguous()?;
    }
    Ok((q, k, v, unbatched))
}

fn scores_to_weights(q: &Tensor, k: &Tensor, head_dim: usize) -> Result<Tensor> {
    let logits = q
        .matmul(&k.transpose(2, 3)?.contiguous()?)?
        .affine(1.0 / (head_dim as f64).sqrt(), 0.0)?;
    softmax_last_dim(&logits)
}

/// Attention probabilities `(B, heads, n_q, n_kv)` (batch axis dropped for
/// unbatched queries).
pub fn attention_weights(q_in: &Tensor, kv_in: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (q, k, _, unbatched) = projections(q_in, kv_in, p)?;
    let w = scores_to_weights(&q, &k, p.head_dim())?;
    Ok(if unbatched { w.squeeze(0)? } else { w })
}

/// Multi-head attention of `q_in` `(…, n_q, d_query)` over `kv_in`
/// `(…, n_kv, d_kv)`. A rank-2 `kv_in` is shared by every query batch.
pub fn cross_attention(q_in: &Tensor, kv_in: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (q, k, v, unbatched) = projections(q_in, kv_in, p)?;
    let w = scores_to_weights(&q, &k, p.head_dim())?;
    let ctx = w.matmul(&v)?; // (B, h, n_q, d_head)
    let (b, _, nq, _) = ctx.dims4()?;
    let ctx = ctx.transpose(1, 2)?.contiguous()?.reshape((b, nq, p.inner_dim()))?;
    let out = ctx.broadcast_matmul(&p.output)?;
    Ok(if unbatched { out.squeeze(0)? } else { out })
}
