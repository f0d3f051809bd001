//! Global feature space construction, greedy coreset compression and the
//! on-disk bank format.

mod coreset;
mod extractor;
pub(crate) mod io;

pub use coreset::{coreset_compress, coverage_radius, ClampWarning, CoresetInit};
pub use extractor::{Extractor, ExtractorConfig, ExtractorKind, FeatureMap};
pub use io::{decode_bank, encode_bank, load_bank, save_bank, BANK_MAGIC, BANK_VERSION};

use candle_core::Tensor;
use ndarray::Array2;

use crate::error::{Error, Result};

/// Origin of one feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchMeta {
    pub image_index: usize,
    pub row: usize,
    pub col: usize,
}

/// Patch features of a set of images.
///
/// Rows are ordered by image, then row-major over the `H/m × W/m` patch
/// grid: row `i·gh·gw + r·gw + c` is patch `(r, c)` of image `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeatureSpace {
    /// `M × d`, row-major.
    pub vectors: Vec<f32>,
    pub d: usize,
    pub meta: Vec<PatchMeta>,
    pub m: usize,
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub fingerprint: String,
}

impl GlobalFeatureSpace {
    pub fn rows(&self) -> usize {
        self.meta.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.m, self.width / self.m)
    }

    /// Rows as a `(M, d)` tensor.
    pub fn to_tensor(&self, like: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.vectors.clone(), (self.rows(), self.d), like.device())?.to_dtype(like.dtype())?)
    }
}

/// Greedily selected representatives of a global feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseFeatureBank {
    /// `ξ × d`, row-major, in selection order.
    pub vectors: Vec<f32>,
    pub xi: usize,
    pub d: usize,
    pub source_ids: Vec<u64>,
    /// Row count of the space the bank was drawn from.
    pub source_rows: u64,
    pub extractor_fingerprint: String,
}

impl CoarseFeatureBank {
    /// A bank with no rows; conditioning blocks treat it as absent.
    pub fn empty(d: usize, fingerprint: &str) -> Self {
        Self {
            vectors: Vec::new(),
            xi: 0,
            d,
            source_ids: Vec::new(),
            source_rows: 0,
            extractor_fingerprint: fingerprint.to_string(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    /// Rows as `(ξ, d)` tokens in the dtype/device of `like`.
    pub fn tokens(&self, like: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.vectors.clone(), (self.xi, self.d), like.device())?.to_dtype(like.dtype())?)
    }

    /// Same rows with the feature columns permuted (a deliberately wrong
    /// condition; row permutations alone are invisible to attention).
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.d).collect::<Vec<_>>() {
            return Err(Error::param("perm", "not a permutation of the feature columns"));
        }
        let mut out = self.clone();
        for r in 0..self.xi {
            for (j, &p) in perm.iter().enumerate() {
                out.vectors[r * self.d + j] = self.vectors[r * self.d + p];
            }
        }
        Ok(out)
    }
}

fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::param("images", "empty batch"))?;
    let (c, h, w) = first.dims3()?;
    for (i, im) in images.iter().enumerate() {
        if im.dims() != [c, h, w] {
            return Err(Error::Shape(format!(
                "image {i} has shape {:?}, expected {:?}",
                im.dims(),
                [c, h, w]
            )));
        }
    }
    Ok(Tensor::stack(images, 0)?)
}

/// Extracts the global feature space of `images`, each `(C, H, W)`.
pub fn extract_features(images: &[Tensor], cfg: &ExtractorConfig) -> Result<GlobalFeatureSpace> {
    let batch = stack_images(images)?;
    let ex = Extractor::new(cfg, batch.dim(1)?)?;
    extract_batch(&ex, &batch)
}

/// Extracts features of an already stacked `(N, C, H, W)` batch.
pub fn extract_batch(ex: &Extractor, batch: &Tensor) -> Result<GlobalFeatureSpace> {
    let cfg = ex.config();
    let (n, _, h, w) = batch.dims4()?;
    if n == 0 {
        return Err(Error::param("images", "empty batch"));
    }
    let (gh, gw) = (h / cfg.m, w / cfg.m);
    if gh == 0 || gw == 0 {
        return Err(Error::param("m", format!("ratio {} exceeds image size {h}x{w}", cfg.m)));
    }
    let rows = n * gh * gw;
    let vectors = match cfg.kind {
        ExtractorKind::SeededConv => {
            let maps = ex.layer_maps(batch, &cfg.layer_spec)?;
            let maps: Vec<FeatureMap> = maps.iter().map(|f| f.resample(gh, gw)).collect();
            let total: usize = maps.iter().map(|f| f.c).sum();
            let mut concat = vec![0f32; total];
            let mut out = Vec::with_capacity(rows * cfg.d);
            for i in 0..n {
                for r in 0..gh {
                    for c in 0..gw {
                        let mut k = 0;
                        for f in &maps {
                            for ch in 0..f.c {
                                concat[k] = f.at(i, ch, r, c);
                                k += 1;
                            }
                        }
                        pool_channels(&concat, cfg.d, &mut out);
                    }
                }
            }
            out
        }
        ExtractorKind::Imported => {
            let path = cfg
                .import_path
                .as_ref()
                .ok_or_else(|| Error::param("import_path", "missing"))?;
            let arr: Array2<f32> =
                ndarray_npy::read_npy(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
            let (mr, md) = arr.dim();
            if mr != rows || md != cfg.d {
                return Err(Error::Shape(format!(
                    "imported features are {mr}x{md}, expected {rows}x{}",
                    cfg.d
                )));
            }
            arr.iter().copied().collect()
        }
    };
    let meta = (0..n)
        .flat_map(|i| {
            (0..gh).flat_map(move |r| {
                (0..gw).map(move |c| PatchMeta {
                    image_index: i,
                    row: r,
                    col: c,
                })
            })
        })
        .collect();
    Ok(GlobalFeatureSpace {
        vectors,
        d: cfg.d,
        meta,
        m: cfg.m,
        n_images: n,
        height: h,
        width: w,
        fingerprint: cfg.fingerprint(),
    })
}

/// Adaptive average pooling of one vector down to `d` entries.
fn pool_channels(v: &[f32], d: usize, out: &mut Vec<f32>) {
    let n = v.len();
    if n == d {
        out.extend_from_slice(v);
        return;
    }
    for j in 0..d {
        let s = j * n / d;
        let e = ((j + 1) * n).div_ceil(d);
        let acc: f64 = v[s..e].iter().map(|x| *x as f64).sum();
        out.push((acc / (e - s) as f64) as f32);
    }
}
