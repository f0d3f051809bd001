//! Binary checkpoints.
//!
//! Layout (little-endian): magic `CCADCKPT`, version `u32`, variant tag
//! `u8`, header length `u32` + UTF-8 JSON header (the model spec and
//! training config echo), tensor count `u32`, then per tensor: name length
//! `u16` + UTF-8 name, rank `u32`, dims `u64 × rank`, `f32` payload.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::{CcadModel, ModelSpec};
use crate::backbone::LatentCodec;
use crate::backbone::Variant;
use crate::error::{Error, Result};
use crate::feature_bank::io::Reader;
use crate::nn::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    pub codec_scale: f64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub loss_history_len: usize,
}

fn stores(model: &CcadModel) -> Vec<&ParamStore> {
    let mut v = vec![model.denoiser.store(), model.codec.store()];
    if let Some(f) = &model.fcm {
        v.push(&f.store);
    }
    v
}

pub fn encode_checkpoint(model: &CcadModel, train: Option<&TrainConfig>, loss_history_len: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.spec.clone(),
        codec_scale: model.codec.scale(),
        train: train.cloned(),
        loss_history_len,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(model.variant().tag());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let params: Vec<_> = stores(model).into_iter().flat_map(|s| s.iter()).collect();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Malformed(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = p.var.dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let v: Vec<f32> = p.var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CcadModel, CheckpointHeader)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8.min(bytes.len()), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let tag = r.u8("variant tag")?;
    let variant = Variant::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown variant tag {tag}")))?;
    let hlen = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_str(&r.utf8(hlen, "header")?)?;
    if header.model.variant() != variant {
        return Err(Error::Malformed(format!(
            "variant tag {variant} disagrees with header variant {}",
            header.model.variant()
        )));
    }
    let mut codec = LatentCodec::new(&header.model.codec)?;
    codec.set_scale(header.codec_scale);
    let model = CcadModel::with_codec(&header.model, codec)?;
    let mut expected: BTreeSet<String> = stores(&model)
        .iter()
        .flat_map(|s| s.iter().map(|(n, _)| n.clone()))
        .collect();
    let count = r.u32("tensor count")?;
    for _ in 0..count {
        let nlen = r.u16("name length")? as usize;
        let name = r.utf8(nlen, "tensor name")?;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Malformed(format!("{name}: size overflow")))?;
        let data = r.f32s(n, &name)?;
        if !expected.remove(&name) {
            return Err(Error::Malformed(format!("unexpected or duplicate tensor {name}")));
        }
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?;
        let store = stores(&model)
            .into_iter()
            .find(|s| s.param(&name).is_some())
            .expect("name was expected");
        store.set(&name, &t)?;
    }
    if let Some(missing) = expected.iter().next() {
        return Err(Error::Truncated(format!(
            "tensor {missing} missing ({} absent)",
            expected.len()
        )));
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok((model, header))
}

pub fn save_checkpoint(
    model: &CcadModel,
    train: Option<&TrainConfig>,
    loss_history_len: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, train, loss_history_len)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CcadModel, CheckpointHeader)> {
    decode_checkpoint(&std::fs::read(path)?)
}
