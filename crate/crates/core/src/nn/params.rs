//! Named parameter registry with per-parameter trainability.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parameter initialisation rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

/// Owns every learnable (or frozen) tensor of a model, keyed by a dotted
/// path. Initial values are a pure function of `(seed, name, shape)`.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
            device: device.clone(),
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates (or returns the existing) parameter `name`.
    ///
    /// Trainable parameters are returned as variable-backed tensors so
    /// gradients reach them; frozen ones come back detached (same storage,
    /// no gradient tracking).
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        if let Some(p) = self.params.get(name) {
            if p.var.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    p.var.dims(),
                    shape
                )));
            }
            return Ok(Self::view(p));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let p = Param {
            var: Var::from_tensor(&t)?,
            trainable,
        };
        let view = Self::view(&p);
        self.params.insert(name.to_string(), p);
        Ok(view)
    }

    fn view(p: &Param) -> Tensor {
        if p.trainable {
            p.var.as_tensor().clone()
        } else {
            p.var.as_detached_tensor()
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    pub fn frozen(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    /// Overwrites parameter `name` in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var
            .set(&value.to_dtype(self.dtype)?.to_device(&self.device)?.contiguous()?)?;
        Ok(())
    }

    /// SHA-256 over names and little-endian values of the selected parameters.
    pub fn digest(&self, trainable: Option<bool>) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            if trainable.is_some_and(|t| t != p.trainable) {
                continue;
            }
            h.update(name.as_bytes());
            let v: Vec<f64> = p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }
}

/// Prefix helper so layer constructors can say `scope.get("weight", ..)`.
pub struct Scope<'a> {
    pub store: &'a mut ParamStore,
    prefix: String,
    trainable: bool,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: &str, trainable: bool) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
            trainable,
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
            trainable: self.trainable,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get(&full, shape, init, self.trainable)
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_name() {
        let mut a = ParamStore::new(DType::F32, &Device::Cpu, 9);
        let mut b = ParamStore::new(DType::F32, &Device::Cpu, 9);
        let x = a.get("blk.w", &[3, 4], Init::Normal(0.5), true).unwrap();
        let _ = b.get("other", &[2], Init::Normal(1.0), true).unwrap();
        let y = b.get("blk.w", &[3, 4], Init::Normal(0.5), true).unwrap();
        let xv: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yv: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(xv, yv);
    }

    #[test]
    fn frozen_views_share_storage_but_not_gradients() {
        let mut s = ParamStore::new(DType::F64, &Device::Cpu, 1);
        let w = s.get("w", &[2], Init::Ones, false).unwrap();
        let v = s.get("v", &[2], Init::Ones, true).unwrap();
        let loss = (w.clone() * &v).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let frozen = &s.frozen()[0].1;
        assert!(g.get(frozen.as_tensor()).is_none());
        assert!(g.get(&v).is_some());
        s.set("w", &Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap(), vec![3.0, 4.0]);
        assert_eq!(s.frozen().len(), 1);
        assert_eq!(s.trainable().len(), 1);
    }

    #[test]
    fn digest_tracks_values() {
        let mut s = ParamStore::new(DType::F32, &Device::Cpu, 1);
        s.get("a", &[2], Init::Zeros, false).unwrap();
        let d0 = s.digest(Some(false)).unwrap();
        s.set("a", &Tensor::new(&[1.0f32, 0.0], &Device::Cpu).unwrap()).unwrap();
        assert_ne!(d0, s.digest(Some(false)).unwrap());
    }
}
