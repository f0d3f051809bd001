//! Frozen, seeded convolutional feature extractor and the feature-import path.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Conv2d;
use crate::nn::params::{ParamStore, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    SeededConv,
    Imported,
}

/// Describes the encoder that maps images to patch features.
///
/// The seeded convolutional encoder has one stage per entry of `widths`;
/// stage `i` is `conv3x3 → ReLU → 2×2 average pool`, so its output sits at
/// `1/2^(i+1)` of the input resolution. `layer_spec` selects the stages
/// whose outputs are resampled to `H/m × W/m` and concatenated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub layer_spec: Vec<usize>,
    pub d: usize,
    pub m: usize,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub import_path: Option<PathBuf>,
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 64]
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::SeededConv,
            seed: 7,
            layer_spec: vec![1, 2],
            d: 96,
            m: 4,
            widths: default_widths(),
            import_path: None,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::param("m", "downsampling ratio must be >= 1"));
        }
        if self.d == 0 {
            return Err(Error::param("d", "feature dimension must be >= 1"));
        }
        match self.kind {
            ExtractorKind::SeededConv => {
                if self.widths.is_empty() || self.widths.contains(&0) {
                    return Err(Error::param("widths", "stage widths must be non-empty and positive"));
                }
                if self.layer_spec.is_empty() {
                    return Err(Error::param("layer_spec", "select at least one stage"));
                }
                if let Some(l) = self.layer_spec.iter().find(|l| **l >= self.widths.len()) {
                    return Err(Error::param(
                        "layer_spec",
                        format!("stage {l} does not exist ({} stages)", self.widths.len()),
                    ));
                }
                let total = self.concat_dim();
                if self.d > total {
                    return Err(Error::param(
                        "d",
                        format!("{} exceeds the {total} concatenated channels", self.d),
                    ));
                }
            }
            ExtractorKind::Imported => {
                if self.import_path.is_none() {
                    return Err(Error::param("import_path", "imported features need a path"));
                }
            }
        }
        Ok(())
    }

    fn concat_dim(&self) -> usize {
        self.layer_spec
            .iter()
            .map(|l| self.widths.get(*l).copied().unwrap_or(0))
            .sum()
    }

    /// Identifies the encoder; two configs with equal fingerprints produce
    /// identical features.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            ExtractorKind::SeededConv => format!(
                "seeded-conv/v1/seed={}/widths={}/layers={}/d={}/m={}",
                self.seed,
                join(&self.widths),
                join(&self.layer_spec),
                self.d,
                self.m
            ),
            ExtractorKind::Imported => format!(
                "imported/{}/d={}/m={}",
                self.import_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                self.d,
                self.m
            ),
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// A feature map stored as `(N, C, h, w)` row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Vec<f32>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn at(&self, img: usize, ch: usize, y: usize, x: usize) -> f32 {
        self.data[((img * self.c + ch) * self.h + y) * self.w + x]
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        Ok(Self {
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
            n,
            c,
            h,
            w,
        })
    }

    /// Adaptive average pooling to `(oh, ow)`; also upsamples (each output
    /// cell averages the input cells its footprint touches).
    pub fn resample(&self, oh: usize, ow: usize) -> FeatureMap {
        if oh == self.h && ow == self.w {
            return self.clone();
        }
        let mut data = vec![0f32; self.n * self.c * oh * ow];
        let span = |o: usize, out: usize, inp: usize| {
            let start = (o * inp) / out;
            let end = ((o + 1) * inp).div_ceil(out);
            (start, end.max(start + 1))
        };
        for p in 0..self.n * self.c {
            for oy in 0..oh {
                let (y0, y1) = span(oy, oh, self.h);
                for ox in 0..ow {
                    let (x0, x1) = span(ox, ow, self.w);
                    let mut acc = 0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += self.data[(p * self.h + y) * self.w + x] as f64;
                        }
                    }
                    data[(p * oh + oy) * ow + ox] = (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
                }
            }
        }
        FeatureMap {
            data,
            n: self.n,
            c: self.c,
            h: oh,
            w: ow,
        }
    }
}

/// The instantiated encoder.
#[derive(Debug, Clone)]
pub struct Extractor {
    cfg: ExtractorConfig,
    stages: Vec<Conv2d>,
    in_channels: usize,
}

impl Extractor {
    pub fn new(cfg: &ExtractorConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        if cfg.kind == ExtractorKind::SeededConv {
            let mut store = ParamStore::new(DType::F32, &Device::Cpu, cfg.seed);
            let mut scope = Scope::new(&mut store, "extractor", false);
            let mut cin = in_channels;
            for (i, &w) in cfg.widths.iter().enumerate() {
                let mut s = scope.sub(&format!("stage{i}"));
                stages.push(Conv2d::new(&mut s, cin, w, 3, 1, 1)?);
                cin = w;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            in_channels,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    /// Outputs of every stage for a `(N, C, H, W)` batch.
    pub fn stage_maps(&self, images: &Tensor) -> Result<Vec<FeatureMap>> {
        if self.cfg.kind != ExtractorKind::SeededConv {
            return Err(Error::Config("imported features have no stage maps".into()));
        }
        let (_, c, _, _) = images.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "extractor built for {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut h = images.to_dtype(DType::F32)?.detach();
        let mut out = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let (_, _, hh, ww) = h.dims4()?;
            if hh < 2 || ww < 2 {
                return Err(Error::Shape(format!(
                    "input too small for {} stages",
                    self.stages.len()
                )));
            }
            h = conv.forward(&h)?.relu()?.avg_pool2d(2)?;
            out.push(FeatureMap::from_tensor(&h)?);
        }
        Ok(out)
    }

    /// Selected stage maps at their native resolution.
    pub fn layer_maps(&self, images: &Tensor, layers: &[usize]) -> Result<Vec<FeatureMap>> {
        let all = self.stage_maps(images)?;
        layers
            .iter()
            .map(|l| {
                all.get(*l)
                    .cloned()
                    .ok_or_else(|| Error::param("layers", format!("stage {l} does not exist")))
            })
            .collect()
    }
}
