//! MVTec-style dataset trees: discovery, pairing and image loading.
//!
//! ```text
//! <root>/<category>/train/good/*
//! <root>/<category>/test/<defect>/*
//! <root>/<category>/ground_truth/<defect>/<mask pattern>
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use glob::Pattern;
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// `{stem}` is replaced by the test image's file stem.
pub const DEFAULT_MASK_PATTERN: &str = "{stem}_mask.*";

const GOOD: &str = "good";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestItem {
    pub path: PathBuf,
    pub defect: String,
    /// `None` for nominal images (implicit all-zero mask).
    pub mask: Option<PathBuf>,
}

impl TestItem {
    pub fn is_anomalous(&self) -> bool {
        self.defect != GOOD
    }

    /// `<defect>/<stem>`, unique within a category.
    pub fn name(&self) -> String {
        let stem = self
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}/{stem}", self.defect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryManifest {
    pub name: String,
    pub train: Vec<PathBuf>,
    pub test: Vec<TestItem>,
    /// `(width, height)` shared by every image of the category.
    pub image_size: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub categories: Vec<CategoryManifest>,
}

impl DatasetManifest {
    pub fn category(&self, name: Option<&str>) -> Result<&CategoryManifest> {
        match name {
            Some(n) => self
                .categories
                .iter()
                .find(|c| c.name == n)
                .ok_or_else(|| PipelineError::Ingest(format!("no category {n:?} under {}", self.root.display()))),
            None if self.categories.len() == 1 => Ok(&self.categories[0]),
            None => Err(PipelineError::Config(format!(
                "{} categories found; set `category`",
                self.categories.len()
            ))),
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::Ingest(format!("cannot read {}: {e}", dir.display())))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
            matches!(
                e.to_ascii_lowercase().as_str(),
                "png" | "jpg" | "jpeg" | "bmp" | "tif" | "tiff"
            )
        })
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect())
}

fn dims(p: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(p).map_err(|e| PipelineError::Ingest(format!("{}: {e}", p.display())))
}

fn ingest_category(dir: &Path, mask_pattern: &str) -> Result<CategoryManifest> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let train = images_in(&dir.join("train").join(GOOD))?;
    if train.is_empty() {
        return Err(PipelineError::Ingest(format!(
            "{}: no nominal training images",
            dir.display()
        )));
    }
    let mut test = Vec::new();
    let mut orphans = Vec::new();
    let test_dir = dir.join("test");
    let defect_dirs = if test_dir.is_dir() {
        sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()).collect()
    } else {
        Vec::new()
    };
    for d in defect_dirs {
        let defect = d
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let gt_dir = dir.join("ground_truth").join(&defect);
        let candidates = if defect != GOOD && gt_dir.is_dir() {
            images_in(&gt_dir)?
        } else {
            Vec::new()
        };
        for path in images_in(&d)? {
            let mask = if defect == GOOD {
                None
            } else {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let pat = Pattern::new(&mask_pattern.replace("{stem}", &Pattern::escape(&stem)))
                    .map_err(|e| PipelineError::Config(format!("mask pattern {mask_pattern:?}: {e}")))?;
                let found = candidates
                    .iter()
                    .find(|c| c.file_name().is_some_and(|f| pat.matches(&f.to_string_lossy())));
                match found {
                    Some(m) => Some(m.clone()),
                    None => {
                        orphans.push(path.display().to_string());
                        continue;
                    }
                }
            };
            test.push(TestItem {
                path,
                defect: defect.clone(),
                mask,
            });
        }
    }
    if !orphans.is_empty() {
        return Err(PipelineError::Ingest(format!(
            "defective images without a mask: {}",
            orphans.join(", ")
        )));
    }
    let image_size = dims(&train[0])?;
    let mut mismatched = Vec::new();
    for p in train.iter().chain(test.iter().map(|t| &t.path)) {
        if dims(p)? != image_size {
            mismatched.push(p.display().to_string());
        }
    }
    for t in &test {
        if let Some(m) = &t.mask {
            if dims(m)? != dims(&t.path)? {
                mismatched.push(m.display().to_string());
            }
        }
    }
    if !mismatched.is_empty() {
        return Err(PipelineError::Ingest(format!(
            "sizes differ from {}x{}: {}",
            image_size.0,
            image_size.1,
            mismatched.join(", ")
        )));
    }
    Ok(CategoryManifest {
        name,
        train,
        test,
        image_size,
    })
}

/// Scans `root` for categories (every subdirectory) and pairs each
/// defective test image with the mask matching `mask_pattern`.
pub fn ingest(root: &Path, mask_pattern: &str) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(PipelineError::Ingest(format!("{} is not a directory", root.display())));
    }
    let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.is_empty() {
        return Err(PipelineError::Ingest(format!("{}: no categories", root.display())));
    }
    let categories = dirs
        .iter()
        .map(|d| ingest_category(d, mask_pattern))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        categories,
    })
}

/// Loads an image as `(3, size, size)` in `[-1, 1]`; grey images are
/// replicated across channels.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.dimensions() != (size as u32, size as u32) {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    let mut v = vec![0f32; 3 * size * size];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            v[(c * size + y as usize) * size + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(v, (3, size, size), &Device::Cpu)?)
}

/// Loads a mask resized to `size × size` and binarised at half range.
pub fn load_mask(path: &Path, size: usize) -> Result<Vec<bool>> {
    let img = image::open(path)?.to_luma8();
    let img = if img.dimensions() != (size as u32, size as u32) {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest)
    } else {
        img
    };
    Ok(img.pixels().map(|p| p.0[0] >= 128).collect())
}

/// Stacks images into `(N, 3, size, size)`.
pub fn load_images(paths: &[PathBuf], size: usize) -> Result<Tensor> {
    let list = paths.iter().map(|p| load_image(p, size)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&list, 0)?)
}
