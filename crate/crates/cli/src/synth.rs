//! Procedural textures with injected defects, written in the MVTec layout.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ingest, DatasetManifest, DEFAULT_MASK_PATTERN};
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Checker,
    Bands,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Defect {
    Square,
    Scratch,
    Blob,
}

impl Defect {
    pub fn name(self) -> &'static str {
        match self {
            Defect::Square => "square",
            Defect::Scratch => "scratch",
            Defect::Blob => "blob",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub category: String,
    pub n_train: usize,
    pub n_test_good: usize,
    pub n_test_defect: usize,
    pub size: usize,
    pub texture: Texture,
    pub defect: Defect,
    /// Shift applied to defect pixels, in units of the `[-1, 1]` range.
    pub defect_intensity: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            category: "synthetic".into(),
            n_train: 64,
            n_test_good: 16,
            n_test_defect: 16,
            size: 32,
            texture: Texture::Checker,
            defect: Defect::Square,
            defect_intensity: 0.6,
        }
    }
}

/// Peak absolute texture value before noise.
const AMPLITUDE: f64 = 0.5;
const NOISE_STD: f64 = 0.02;

#[derive(Clone, Copy)]
enum Split {
    Train = 1,
    TestGood = 2,
    TestDefect = 3,
}

fn rng_for(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 32) | index as u64);
    rng
}

/// `[-1, 1]` to an 8-bit code.
pub fn to_code(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// 8-bit code back to `[-1, 1]`.
pub fn from_code(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

fn texture(rng: &mut ChaCha8Rng, kind: Texture, size: usize) -> Vec<u8> {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let s = size as f64;
    let values: Vec<f64> = match kind {
        Texture::Checker => {
            let period = (size / 4).max(2);
            let (ox, oy) = (rng.random_range(0..2 * period), rng.random_range(0..2 * period));
            (0..size * size)
                .map(|i| {
                    let (y, x) = (i / size, i % size);
                    let on = ((x + ox) / period + (y + oy) / period) % 2 == 0;
                    if on {
                        AMPLITUDE
                    } else {
                        -AMPLITUDE
                    }
                })
                .collect()
        }
        Texture::Bands => {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(2.0..4.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let phase2 = rng.random_range(0.0..std::f64::consts::TAU);
            (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64, (i % size) as f64);
                    let u = (x * theta.cos() + y * theta.sin()) / s * std::f64::consts::TAU * freq;
                    AMPLITUDE * (0.7 * (u + phase).sin() + 0.3 * (2.3 * u + phase2).sin())
                })
                .collect()
        }
    };
    values.into_iter().map(|v| to_code(v + noise.sample(rng))).collect()
}

fn defect_mask(rng: &mut ChaCha8Rng, kind: Defect, size: usize) -> Vec<bool> {
    let s = size as f64;
    let mut mask = vec![false; size * size];
    match kind {
        Defect::Square => {
            let side = rng.random_range((size / 8).max(1)..=(size / 4).max(1));
            let y0 = rng.random_range(0..=size - side);
            let x0 = rng.random_range(0..=size - side);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    mask[y * size + x] = true;
                }
            }
        }
        Defect::Scratch => {
            let len = rng.random_range(s / 3.0..s / 2.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (theta.cos() * len / 2.0, theta.sin() * len / 2.0);
            let margin = len / 2.0 + 1.0;
            let cx = rng.random_range(margin..s - margin);
            let cy = rng.random_range(margin..s - margin);
            let (ax, ay, bx, by) = (cx - dx, cy - dy, cx + dx, cy + dy);
            let half_width = (s / 32.0).max(0.75);
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let (vx, vy) = (bx - ax, by - ay);
                    let t = (((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                    let (qx, qy) = (ax + t * vx - px, ay + t * vy - py);
                    mask[y * size + x] = (qx * qx + qy * qy).sqrt() <= half_width;
                }
            }
        }
        Defect::Blob => {
            let rx = rng.random_range(s / 10.0..s / 6.0);
            let ry = rng.random_range(s / 10.0..s / 6.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let r = rx.max(ry);
            let cx = rng.random_range(r..s - r);
            let cy = rng.random_range(r..s - r);
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let u = px * theta.cos() + py * theta.sin();
                    let v = -px * theta.sin() + py * theta.cos();
                    mask[y * size + x] = (u / rx).powi(2) + (v / ry).powi(2) <= 1.0;
                }
            }
        }
    }
    if !mask.iter().any(|m| *m) {
        let c = size / 2;
        mask[c * size + c] = true;
    }
    mask
}

/// Moves every masked pixel `intensity` away from its value, toward the
/// opposite sign, in 8-bit code units rounded up.
fn inject(codes: &mut [u8], mask: &[bool], intensity: f64) {
    let step = (intensity * 127.5).ceil() as i32;
    for (q, m) in codes.iter_mut().zip(mask) {
        if *m {
            let v = *q as i32;
            let moved = if v >= 128 { v - step } else { v + step };
            *q = moved.clamp(0, 255) as u8;
        }
    }
}

/// One generated sample as 8-bit grey codes plus its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub nominal: Vec<u8>,
    pub image: Vec<u8>,
    pub mask: Vec<bool>,
}

fn sample(spec: &SynthSpec, split: Split, index: usize) -> Sample {
    let mut rng = rng_for(spec.seed, split, index);
    let nominal = texture(&mut rng, spec.texture, spec.size);
    let mut image = nominal.clone();
    let mask = if matches!(split, Split::TestDefect) {
        let m = defect_mask(&mut rng, spec.defect, spec.size);
        inject(&mut image, &m, spec.defect_intensity);
        m
    } else {
        vec![false; spec.size * spec.size]
    };
    Sample { nominal, image, mask }
}

/// The defective test sample `index` of `spec`, without touching disk.
pub fn defect_sample(spec: &SynthSpec, index: usize) -> Sample {
    sample(spec, Split::TestDefect, index)
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.size < 8 {
        return Err(PipelineError::Config("synth size must be at least 8".into()));
    }
    if spec.n_train == 0 {
        return Err(PipelineError::Config("synth n_train must be positive".into()));
    }
    if !(0.0..=2.0).contains(&spec.defect_intensity) {
        return Err(PipelineError::Config(
            "synth defect_intensity must lie in [0, 2]".into(),
        ));
    }
    if spec.category.is_empty() || spec.category.contains(['/', '\\']) {
        return Err(PipelineError::Config(format!("bad category name {:?}", spec.category)));
    }
    Ok(())
}

fn save_rgb(codes: &[u8], size: usize, path: &Path) -> Result<()> {
    let img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let q = codes[y as usize * size + x as usize];
        Rgb([q, q, q])
    });
    img.save(path)?;
    Ok(())
}

fn save_mask(mask: &[bool], size: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(size as u32, size as u32, |x, y| {
        Luma([if mask[y as usize * size + x as usize] { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Writes `<out>/<category>/{train/good, test/good, test/<defect>,
/// ground_truth/<defect>}` and returns the ingested manifest. Existing files
/// of the same names are overwritten.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    validate(spec)?;
    let cat = out_dir.join(&spec.category);
    let defect = spec.defect.name();
    let dirs = [
        cat.join("train/good"),
        cat.join("test/good"),
        cat.join("test").join(defect),
        cat.join("ground_truth").join(defect),
    ];
    for d in &dirs {
        fs::create_dir_all(d)?;
    }
    let n = spec.size;
    for i in 0..spec.n_train {
        save_rgb(
            &sample(spec, Split::Train, i).image,
            n,
            &dirs[0].join(format!("{i:03}.png")),
        )?;
    }
    for i in 0..spec.n_test_good {
        save_rgb(
            &sample(spec, Split::TestGood, i).image,
            n,
            &dirs[1].join(format!("{i:03}.png")),
        )?;
    }
    for i in 0..spec.n_test_defect {
        let s = sample(spec, Split::TestDefect, i);
        save_rgb(&s.image, n, &dirs[2].join(format!("{i:03}.png")))?;
        save_mask(&s.mask, n, &dirs[3].join(format!("{i:03}_mask.png")))?;
    }
    ingest(out_dir, DEFAULT_MASK_PATTERN)
}
