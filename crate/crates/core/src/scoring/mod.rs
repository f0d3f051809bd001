//! Anomaly maps from feature dissimilarity between an image and its
//! reconstruction, image-level scores, and evaluation reports.

pub mod metrics;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use metrics::{auroc, average_precision, f1_max};

use crate::error::{Error, Result};
use crate::feature_bank::{Extractor, FeatureMap};

/// Norm below which a feature vector counts as dead.
pub const COSINE_EPS: f64 = 1e-8;

/// Per-pixel anomaly values of one image, row-major `height × width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub layer_count: usize,
    pub sigma_l: Vec<f64>,
}

impl AnomalyMap {
    /// Largest value the map can take, `2·Σσ_l`.
    pub fn upper_bound(&self) -> f64 {
        2.0 * self.sigma_l.iter().sum::<f64>()
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Values linearly mapped from `[0, upper_bound]` to `0..=65535`.
    pub fn to_u16(&self) -> Vec<u16> {
        let hi = self.upper_bound();
        self.values
            .iter()
            .map(|v| {
                let r = if hi > 0.0 {
                    (*v as f64 / hi).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (r * 65535.0).round() as u16
            })
            .collect()
    }
}

/// `1 − cos(a, b)` with the dead-feature convention: 0 when both vectors
/// are (near) zero, 1 when exactly one is.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    match (na < COSINE_EPS, nb < COSINE_EPS) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => (1.0 - dot / (na * nb)).clamp(0.0, 2.0),
    }
}

/// Bilinear resize of a row-major `h × w` grid (half-pixel centres,
/// edge-clamped).
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Combines per-layer feature maps of an image (`a`) and its reconstruction
/// (`b`) for sample `img` into an `out_h × out_w` map.
pub fn map_from_features(
    a: &[FeatureMap],
    b: &[FeatureMap],
    img: usize,
    sigma_l: &[f64],
    (out_h, out_w): (usize, usize),
) -> Result<AnomalyMap> {
    if a.len() != b.len() || a.len() != sigma_l.len() {
        return Err(Error::param(
            "sigma_l",
            format!(
                "{} layers, {} reconstructed layers, {} weights",
                a.len(),
                b.len(),
                sigma_l.len()
            ),
        ));
    }
    let mut acc = vec![0f64; out_h * out_w];
    for ((fa, fb), s) in a.iter().zip(b).zip(sigma_l) {
        if (fa.c, fa.h, fa.w) != (fb.c, fb.h, fb.w) {
            return Err(Error::Shape("feature maps of image and reconstruction differ".into()));
        }
        let mut layer = vec![0f64; fa.h * fa.w];
        let mut va = vec![0f32; fa.c];
        let mut vb = vec![0f32; fa.c];
        for y in 0..fa.h {
            for x in 0..fa.w {
                for ch in 0..fa.c {
                    va[ch] = fa.at(img, ch, y, x);
                    vb[ch] = fb.at(img, ch, y, x);
                }
                layer[y * fa.w + x] = cosine_distance(&va, &vb);
            }
        }
        let up = bilinear_resize(&layer, fa.h, fa.w, out_h, out_w);
        for (o, v) in acc.iter_mut().zip(up) {
            *o += s * v;
        }
    }
    Ok(AnomalyMap {
        values: acc.into_iter().map(|v| v as f32).collect(),
        height: out_h,
        width: out_w,
        layer_count: sigma_l.len(),
        sigma_l: sigma_l.to_vec(),
    })
}

fn batched(x: &Tensor) -> Result<Tensor> {
    Ok(match x.rank() {
        3 => x.unsqueeze(0)?,
        4 => x.clone(),
        r => return Err(Error::Shape(format!("expected an image or batch, got rank {r}"))),
    })
}

/// Maps for a batch: `x0` and `x0_hat` are `(C, H, W)` or `(B, C, H, W)`.
pub fn anomaly_maps(
    x0: &Tensor,
    x0_hat: &Tensor,
    psi: &Extractor,
    layers: &[usize],
    sigma_l: &[f64],
) -> Result<Vec<AnomalyMap>> {
    if x0.dims() != x0_hat.dims() {
        return Err(Error::Shape(format!(
            "image {:?} vs reconstruction {:?}",
            x0.dims(),
            x0_hat.dims()
        )));
    }
    if layers.len() != sigma_l.len() {
        return Err(Error::param(
            "sigma_l",
            format!("{} layers but {} weights", layers.len(), sigma_l.len()),
        ));
    }
    let a = batched(&x0.to_dtype(DType::F32)?)?;
    let b = batched(&x0_hat.to_dtype(DType::F32)?)?;
    let (n, _, h, w) = a.dims4()?;
    let fa = psi.layer_maps(&a, layers)?;
    let fb = psi.layer_maps(&b, layers)?;
    (0..n)
        .map(|i| map_from_features(&fa, &fb, i, sigma_l, (h, w)))
        .collect()
}

/// Single-image form of [`anomaly_maps`].
pub fn anomaly_map(
    x0: &Tensor,
    x0_hat: &Tensor,
    psi: &Extractor,
    layers: &[usize],
    sigma_l: &[f64],
) -> Result<AnomalyMap> {
    let mut maps = anomaly_maps(x0, x0_hat, psi, layers, sigma_l)?;
    if maps.len() != 1 {
        return Err(Error::Shape(format!("expected one image, got {}", maps.len())));
    }
    Ok(maps.remove(0))
}

/// Normalised 1-D Gaussian taps with radius `round(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection of index `i` into `[0, n)`.
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian smoothing with reflecting borders.
pub fn gaussian_smooth(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut rows = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, t)| t * values[y * w + reflect(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, t)| t * rows[reflect(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Image-level score: maximum of the Gaussian-smoothed map (`smooth_sigma`
/// 0 gives the raw maximum).
pub fn image_score(map: &AnomalyMap, smooth_sigma: f64) -> Result<f64> {
    if !(smooth_sigma.is_finite() && smooth_sigma >= 0.0) {
        return Err(Error::param("smooth_sigma", "must be finite and >= 0"));
    }
    let v: Vec<f64> = map.values.iter().map(|x| *x as f64).collect();
    let s = gaussian_smooth(&v, map.height, map.width, smooth_sigma);
    Ok(s.into_iter().fold(0.0, f64::max))
}

/// Image- and pixel-level metrics for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub images: Vec<ImageResult>,
    pub class_auroc: f64,
    pub class_f1_max: f64,
    pub class_ap: f64,
    pub pixel_auroc: f64,
    pub pixel_f1_max: f64,
    pub pixel_ap: f64,
    pub smooth_sigma: f64,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub name: String,
    pub anomalous: bool,
    pub score: f64,
}

/// One evaluated image: its map and its ground-truth mask (`true` marks a
/// defect pixel; same layout as the map).
pub struct Evaluated<'a> {
    pub name: String,
    pub map: &'a AnomalyMap,
    pub mask: &'a [bool],
}

pub fn evaluate(items: &[Evaluated<'_>], smooth_sigma: f64) -> Result<ScoreReport> {
    let mut images = Vec::with_capacity(items.len());
    let mut pix_scores = Vec::new();
    let mut pix_labels = Vec::new();
    for it in items {
        if it.mask.len() != it.map.values.len() {
            return Err(Error::Shape(format!(
                "{}: mask has {} pixels, map has {}",
                it.name,
                it.mask.len(),
                it.map.values.len()
            )));
        }
        images.push(ImageResult {
            name: it.name.clone(),
            anomalous: it.mask.iter().any(|m| *m),
            score: image_score(it.map, smooth_sigma)?,
        });
        pix_scores.extend(it.map.values.iter().map(|v| *v as f64));
        pix_labels.extend_from_slice(it.mask);
    }
    let scores: Vec<f64> = images.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = images.iter().map(|r| r.anomalous).collect();
    Ok(ScoreReport {
        class_auroc: auroc(&scores, &labels)?,
        class_f1_max: f1_max(&scores, &labels)?,
        class_ap: average_precision(&scores, &labels)?,
        pixel_auroc: auroc(&pix_scores, &pix_labels)?,
        pixel_f1_max: f1_max(&pix_scores, &pix_labels)?,
        pixel_ap: average_precision(&pix_scores, &pix_labels)?,
        smooth_sigma,
        pixel_count: pix_scores.len(),
        images,
    })
}
