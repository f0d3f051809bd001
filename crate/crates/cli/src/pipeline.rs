//! The stages behind each subcommand. Every stage reads its inputs from the
//! configured data root and work directory and writes its artifacts there.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ccad::backbone::Variant;
use ccad::feature_bank::{coreset_compress, extract_batch, load_bank, save_bank, CoarseFeatureBank, Extractor};
use ccad::scoring::{anomaly_maps, evaluate as score_metrics, image_score, AnomalyMap, Evaluated, ScoreReport};
use ccad::training::checkpoint::{load_checkpoint, save_checkpoint};
use ccad::training::{self, reconstruct_fc, reconstruct_v, CcadModel};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{ingest, load_image, load_images, load_mask, CategoryManifest, DatasetManifest, TestItem};
use crate::error::{PipelineError, Result};
use crate::synth::{synth_generate, to_code};

/// Version tag embedded in reports.
pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn synth_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    synth_generate(&cfg.synth_spec(), &cfg.data_root)
}

pub fn category(cfg: &RunConfig) -> Result<CategoryManifest> {
    let m = ingest(&cfg.data_root, &cfg.mask_pattern)?;
    Ok(m.category(cfg.category.as_deref())?.clone())
}

pub fn load_train(cfg: &RunConfig) -> Result<Tensor> {
    load_images(&category(cfg)?.train, cfg.image_size)
}

/// Test images with their ground truth, in manifest order.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub images: Tensor,
    pub items: Vec<TestItem>,
    pub masks: Vec<Vec<bool>>,
}

pub fn load_test(cfg: &RunConfig) -> Result<TestSet> {
    let cat = category(cfg)?;
    if cat.test.is_empty() {
        return Err(PipelineError::Ingest(format!(
            "category {} has no test images",
            cat.name
        )));
    }
    let n = cfg.image_size;
    let list = cat
        .test
        .iter()
        .map(|t| load_image(&t.path, n))
        .collect::<Result<Vec<_>>>()?;
    let masks = cat
        .test
        .iter()
        .map(|t| match &t.mask {
            Some(p) => load_mask(p, n),
            None => Ok(vec![false; n * n]),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TestSet {
        images: Tensor::stack(&list, 0)?,
        items: cat.test,
        masks,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|_| PipelineError::Missing(format!("{what} not found at {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Sidecar recording the configuration an artifact was produced with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub version: String,
    pub config: RunConfig,
}

fn echo(cfg: &RunConfig) -> ConfigEcho {
    ConfigEcho {
        version: version(),
        config: cfg.clone(),
    }
}

/// Features of the nominal training set, compressed to `bank_size` rows.
pub fn build_bank(cfg: &RunConfig) -> Result<CoarseFeatureBank> {
    let ex_cfg = cfg.extractor_config();
    let bank = if cfg.bank_size == 0 {
        CoarseFeatureBank::empty(ex_cfg.d, &ex_cfg.fingerprint())
    } else {
        let images = load_train(cfg)?;
        let ex = Extractor::new(&ex_cfg, images.dim(1)?)?;
        let space = extract_batch(&ex, &images)?;
        coreset_compress(&space, cfg.bank_size, cfg.coreset_init())?.0
    };
    let p = cfg.paths();
    fs::create_dir_all(&cfg.work_dir)?;
    save_bank(&bank, &p.bank)?;
    write_json(&p.bank_echo, &echo(cfg))?;
    log::info!("bank: {} rows of dim {} -> {}", bank.xi, bank.d, p.bank.display());
    Ok(bank)
}

pub fn load_bank_for(cfg: &RunConfig) -> Result<CoarseFeatureBank> {
    let p = cfg.paths().bank;
    if !p.is_file() {
        return Err(PipelineError::Missing(format!(
            "bank required: no bank at {} (run `ccad build-bank` first)",
            p.display()
        )));
    }
    Ok(load_bank(&p)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: Variant,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub codec_mae: Option<f64>,
}

impl TrainLog {
    /// Means of the first and last `n` losses.
    pub fn loss_ends(&self, n: usize) -> Option<(f64, f64)> {
        if self.losses.len() < n || n == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..n]), mean(&self.losses[self.losses.len() - n..])))
    }
}

/// Fits the codec (latent variants), trains the denoiser against the stored
/// bank and writes the checkpoint.
pub fn train(cfg: &RunConfig) -> Result<TrainLog> {
    let bank = load_bank_for(cfg)?;
    let images = load_train(cfg)?;
    let spec = cfg.model_spec();
    let mut model = CcadModel::build(&spec, &images)?;
    let before = model.frozen_digest()?;
    let tc = cfg.train_config();
    let state = training::train(&mut model, &images, Some(&bank), &tc)?;
    let log = TrainLog {
        variant: cfg.variant,
        steps: state.step,
        losses: state.losses,
        frozen_digest_before: before,
        frozen_digest_after: model.frozen_digest()?,
        codec_mae: model.codec.train_mae(),
    };
    let p = cfg.paths();
    fs::create_dir_all(&cfg.work_dir)?;
    save_checkpoint(&model, Some(&tc), log.losses.len(), &p.checkpoint)?;
    write_json(&p.checkpoint_echo, &echo(cfg))?;
    write_json(&p.train_log, &log)?;
    Ok(log)
}

/// Loads the checkpoint and checks it was built for this configuration.
pub fn load_model(cfg: &RunConfig) -> Result<CcadModel> {
    let p = cfg.paths().checkpoint;
    if !p.is_file() {
        return Err(PipelineError::Missing(format!(
            "checkpoint required: none at {} (run `ccad train` first)",
            p.display()
        )));
    }
    let (model, header) = load_checkpoint(&p)?;
    if header.model != cfg.model_spec() {
        return Err(PipelineError::Config(format!(
            "checkpoint {} was trained with a different model configuration",
            p.display()
        )));
    }
    Ok(model)
}

/// Reconstructs `images` batch by batch with one seeded noise stream.
pub fn reconstruct_images(
    cfg: &RunConfig,
    model: &CcadModel,
    bank: &CoarseFeatureBank,
    images: &Tensor,
) -> Result<Tensor> {
    let tc = cfg.train_config();
    let schedule = tc.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.inference_seed);
    let n = images.dim(0)?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let len = cfg.eval_batch_size.min(n - start);
        let x = images.narrow(0, start, len)?;
        let r = match model.variant() {
            Variant::V => reconstruct_v(
                model,
                &x,
                bank,
                &schedule,
                &tc.guidance()?,
                tc.inference_steps,
                &mut rng,
            )?,
            Variant::F | Variant::C => reconstruct_fc(model, &x, bank, &schedule, tc.inference_steps, None, &mut rng)?,
        };
        out.push(r);
        start += len;
    }
    Ok(Tensor::cat(&out, 0)?)
}

fn tensor_to_array(t: &Tensor) -> Result<Array4<f32>> {
    let (n, c, h, w) = t.dims4()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Array4::from_shape_vec((n, c, h, w), v).map_err(|e| PipelineError::Npy(e.to_string()))
}

fn array_to_tensor(a: Array4<f32>) -> Result<Tensor> {
    let shape = a.shape().to_vec();
    let v: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    ndarray_npy::write_npy(path, &tensor_to_array(t)?).map_err(|e| PipelineError::Npy(e.to_string()))
}

fn read_npy(path: &Path, what: &str) -> Result<Tensor> {
    if !path.is_file() {
        return Err(PipelineError::Missing(format!(
            "{what} not found at {}",
            path.display()
        )));
    }
    let a: Array4<f32> = ndarray_npy::read_npy(path).map_err(|e| PipelineError::Npy(e.to_string()))?;
    array_to_tensor(a)
}

fn item_path(dir: &Path, item: &TestItem) -> std::path::PathBuf {
    dir.join(format!("{}.png", item.name()))
}

fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    let (_, h, w) = t.dims3()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_code(v[(c * h + y as usize) * w + x as usize] as f64);
        Rgb([at(0), at(1), at(2)])
    });
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    img.save(path)?;
    Ok(())
}

fn save_map(map: &AnomalyMap, path: &Path) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width as u32, map.height as u32, map.to_u16()).expect("buffer matches map size");
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    img.save(path)?;
    Ok(())
}

/// Reconstructs every test image; writes an `.npy` stack and PNG previews.
pub fn reconstruct(cfg: &RunConfig) -> Result<Tensor> {
    let model = load_model(cfg)?;
    let bank = load_bank_for(cfg)?;
    let test = load_test(cfg)?;
    let rec = reconstruct_images(cfg, &model, &bank, &test.images)?;
    let p = cfg.paths();
    fs::create_dir_all(&cfg.work_dir)?;
    write_npy(&p.reconstructions, &rec)?;
    for (i, item) in test.items.iter().enumerate() {
        save_rgb(&rec.get(i)?, &item_path(&p.reconstruction_pngs, item))?;
    }
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub anomalous: bool,
    pub score: f64,
}

/// Anomaly maps of the test images against their stored reconstructions.
pub fn maps_for(cfg: &RunConfig, images: &Tensor, reconstructions: &Tensor) -> Result<Vec<AnomalyMap>> {
    let ex = Extractor::new(&cfg.extractor_config(), images.dim(1)?)?;
    Ok(anomaly_maps(
        images,
        reconstructions,
        &ex,
        &cfg.score_layers,
        &cfg.score_weights,
    )?)
}

/// Scores stored reconstructions; writes maps (`.npy` and 16-bit PNGs) and
/// per-image scores.
pub fn score(cfg: &RunConfig) -> Result<Vec<ImageScore>> {
    let p = cfg.paths();
    let test = load_test(cfg)?;
    let rec = read_npy(&p.reconstructions, "reconstructions (run `ccad reconstruct` first)")?;
    if rec.dims() != test.images.dims() {
        return Err(PipelineError::Config(format!(
            "stored reconstructions {:?} do not match the test set {:?}",
            rec.dims(),
            test.images.dims()
        )));
    }
    let maps = maps_for(cfg, &test.images, &rec)?;
    persist_maps(cfg, &test, &maps)
}

fn persist_maps(cfg: &RunConfig, test: &TestSet, maps: &[AnomalyMap]) -> Result<Vec<ImageScore>> {
    let p = cfg.paths();
    let (h, w) = (maps[0].height, maps[0].width);
    let flat: Vec<f32> = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
    write_npy(&p.maps, &Tensor::from_vec(flat, (maps.len(), 1, h, w), &Device::Cpu)?)?;
    let mut scores = Vec::with_capacity(maps.len());
    for (m, item) in maps.iter().zip(&test.items) {
        save_map(m, &item_path(&p.map_pngs, item))?;
        scores.push(ImageScore {
            name: item.name(),
            anomalous: item.is_anomalous(),
            score: image_score(m, cfg.smooth_sigma)?,
        });
    }
    write_json(&p.scores, &scores)?;
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub synth: u64,
    pub extractor: u64,
    pub model: u64,
    pub codec: u64,
    pub fcm: u64,
    pub train: u64,
    pub inference: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub variant: Variant,
    pub category: String,
    pub bank_rows: usize,
    pub seeds: Seeds,
    pub metrics: ScoreReport,
    pub config: RunConfig,
}

/// Metrics of precomputed maps against the test ground truth.
pub fn metrics_for(cfg: &RunConfig, test: &TestSet, maps: &[AnomalyMap]) -> Result<ScoreReport> {
    let items: Vec<Evaluated> = maps
        .iter()
        .zip(&test.items)
        .zip(&test.masks)
        .map(|((m, item), mask)| Evaluated {
            name: item.name(),
            map: m,
            mask,
        })
        .collect();
    Ok(score_metrics(&items, cfg.smooth_sigma)?)
}

/// Reconstructs and scores the test set, then writes the JSON report.
pub fn evaluate(cfg: &RunConfig) -> Result<Report> {
    let model = load_model(cfg)?;
    let bank = load_bank_for(cfg)?;
    let test = load_test(cfg)?;
    let rec = reconstruct_images(cfg, &model, &bank, &test.images)?;
    let p = cfg.paths();
    fs::create_dir_all(&cfg.work_dir)?;
    write_npy(&p.reconstructions, &rec)?;
    for (i, item) in test.items.iter().enumerate() {
        save_rgb(&rec.get(i)?, &item_path(&p.reconstruction_pngs, item))?;
    }
    let maps = maps_for(cfg, &test.images, &rec)?;
    persist_maps(cfg, &test, &maps)?;
    let metrics = metrics_for(cfg, &test, &maps)?;
    let report = Report {
        version: version(),
        variant: cfg.variant,
        category: category(cfg)?.name,
        bank_rows: bank.xi,
        seeds: Seeds {
            synth: cfg.synth_seed,
            extractor: cfg.extractor_seed,
            model: cfg.model_seed,
            codec: cfg.codec_seed,
            fcm: cfg.fcm_seed,
            train: cfg.train_seed,
            inference: cfg.inference_seed,
        },
        metrics,
        config: cfg.clone(),
    };
    write_json(&p.report, &report)?;
    Ok(report)
}

/// Renders the stored report as Markdown and writes it next to the JSON.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let p = cfg.paths();
    let r: Report = read_json(&p.report, "report (run `ccad evaluate` first)")?;
    let m = &r.metrics;
    let mut s = format!(
        "# {} / CCAD({}) {}\n\n| level | AUROC | F1-max | AP |\n|---|---|---|---|\n",
        r.category,
        r.variant.to_string().to_uppercase(),
        r.version
    );
    s += &format!(
        "| image | {:.4} | {:.4} | {:.4} |\n",
        m.class_auroc, m.class_f1_max, m.class_ap
    );
    s += &format!(
        "| pixel | {:.4} | {:.4} | {:.4} |\n\n",
        m.pixel_auroc, m.pixel_f1_max, m.pixel_ap
    );
    s += &format!(
        "{} test images, {} pixels, bank of {} rows, smoothing sigma {}.\n",
        m.images.len(),
        m.pixel_count,
        r.bank_rows,
        m.smooth_sigma
    );
    fs::write(&p.summary, &s)?;
    Ok(s)
}
