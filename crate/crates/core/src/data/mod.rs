//! Corpus loading, splitting, augmentation and synthetic data.
//!
//! Layout: `root/images/<id>.png` and `root/masks/<id>_mask.png` (extra
//! annotations as `<id>_mask_1.png` and so on are OR-merged). Class
//! subfolders under either directory are flattened.

mod augment;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::fnv1a64;
use crate::tensor::{Shape, Tensor};

pub use augment::{augment, AugmentParams, Interp, CROP_FRACTION, MAX_ROTATION_DEG};
pub use synth::{synth_pair, write_synthetic_corpus, SYNTH_FRACTION_RANGE};

/// Mask pixels strictly above this (out of 255) are lesion.
pub const MASK_THRESHOLD: u8 = 127;
pub const TRAIN_FRACTION: f64 = 0.8;
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, 3, S, S)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, 1, S, S)` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub warnings: Vec<String>,
    pub errors: Vec<(PathBuf, String)>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty() && self.errors.is_empty()
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("rgb shape")
}

pub fn gray_to_mask(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] > MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(Shape::new(1, 1, h, w), data).expect("mask shape")
}

/// `(1, 1, H, W)` binary mask to a 0/255 grayscale image.
pub fn mask_to_gray(mask: &Tensor<f32>) -> GrayImage {
    let s = mask.shape();
    GrayImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        image::Luma([if mask.at(0, 0, y as usize, x as usize) >= 0.5 { 255 } else { 0 }])
    })
}

/// `(1, 3, H, W)` image in `[0, 1]` to RGB.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let s = t.shape();
    RgbImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        let px = |c| (t.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Input with lesion pixels tinted red.
pub fn overlay(img: &RgbImage, mask: &GrayImage) -> RgbImage {
    const ALPHA: f32 = 0.45;
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if mask.get_pixel(x, y)[0] > MASK_THRESHOLD {
            let tint = [255.0, 0.0, 0.0];
            for c in 0..3 {
                p[c] = ((1.0 - ALPHA) * p[c] as f32 + ALPHA * tint[c]).round() as u8;
            }
        }
    }
    out
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Read an image file and resize it to `size x size` (bilinear).
pub fn load_image(path: &Path, size: usize) -> Result<(Tensor<f32>, (u32, u32))> {
    let img = open(path)?.to_rgb8();
    let dims = img.dimensions();
    let img = if dims == (size as u32, size as u32) {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok((rgb_to_tensor(&img), dims))
}

fn png_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            png_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    Ok(())
}

/// `Some(id)` for `<id>_mask.png` or `<id>_mask_<k>.png`.
pub fn mask_owner(stem: &str) -> Option<&str> {
    let at = stem.rfind("_mask")?;
    let rest = &stem[at + 5..];
    let ok = rest.is_empty() || rest.strip_prefix('_').is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()));
    ok.then(|| &stem[..at])
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_pair(image: &Path, masks: &[PathBuf], size: usize) -> Result<Sample> {
    let (img, dims) = load_image(image, size)?;
    let mut merged: Option<GrayImage> = None;
    for m in masks {
        let g = open(m)?.to_luma8();
        if g.dimensions() != dims {
            return Err(Error::Validation(format!(
                "{}: mask is {:?} but image is {dims:?}",
                m.display(),
                g.dimensions()
            )));
        }
        merged = Some(match merged {
            None => g,
            Some(mut acc) => {
                for (a, b) in acc.pixels_mut().zip(g.pixels()) {
                    if b[0] > MASK_THRESHOLD {
                        a[0] = 255;
                    }
                }
                acc
            }
        });
    }
    let merged = merged.expect("at least one mask");
    let bin = GrayImage::from_fn(merged.width(), merged.height(), |x, y| {
        image::Luma([if merged.get_pixel(x, y)[0] > MASK_THRESHOLD { 255 } else { 0 }])
    });
    let resized = imageops::resize(&bin, size as u32, size as u32, FilterType::Nearest);
    Ok(Sample { id: stem(image), image: img, mask: gray_to_mask(&resized) })
}

/// Load every image/mask pair under `root`, resized to `size`. Per-file
/// problems go into the report instead of aborting the load.
pub fn load_corpus(root: &Path, size: usize) -> Result<(Vec<Sample>, LoadReport)> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found")));
    }
    let mut report = LoadReport::default();
    let mut files = Vec::new();
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        if dir.is_dir() {
            png_files(&dir, &mut files)?;
        } else {
            report.warnings.push(format!("{} is missing", dir.display()));
        }
    }
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut masks: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for f in files {
        let s = stem(&f);
        match mask_owner(&s) {
            Some(id) => masks.entry(id.to_string()).or_default().push(f),
            None => {
                if let Some(prev) = images.insert(s.clone(), f.clone()) {
                    report.errors.push((f, format!("duplicate image id {s} (also {})", prev.display())));
                }
            }
        }
    }
    let mut samples = Vec::new();
    for (id, path) in &images {
        let Some(ms) = masks.get_mut(id) else {
            report.errors.push((path.clone(), format!("no mask for image {id}")));
            continue;
        };
        ms.sort();
        match load_pair(path, ms, size) {
            Ok(s) => samples.push(s),
            Err(e) => report.errors.push((path.clone(), e.to_string())),
        }
    }
    for (id, ms) in &masks {
        if !images.contains_key(id) {
            report.warnings.push(format!("mask {} has no image", ms[0].display()));
        }
    }
    if samples.is_empty() && report.errors.is_empty() {
        report.warnings.push(format!("no image/mask pairs under {}", root.display()));
    }
    Ok((samples, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Subset sizes `(train, val, test)` for `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    if n < 2 {
        return (n, 0, 0);
    }
    let fit = ((TRAIN_FRACTION * n as f64).floor() as usize).clamp(1, n - 1);
    let val = if fit >= 2 { ((VAL_FRACTION * fit as f64).floor() as usize).max(1) } else { 0 };
    (fit - val, val, n - fit)
}

/// Sort by id, shuffle with a seeded generator, then cut into
/// train / val / test.
pub fn split(mut samples: Vec<Sample>, seed: u64) -> Split {
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let (tr, va, _) = split_sizes(samples.len());
    let test = samples.split_off(tr + va);
    let val = samples.split_off(tr);
    Split { train: samples, val, test }
}

/// Independent generator for one sample in one epoch.
pub fn sample_rng(seed: u64, epoch: usize, id: &str) -> ChaCha8Rng {
    let k = fnv1a64(id.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    ChaCha8Rng::seed_from_u64(k)
}

/// Stack samples into an `(N, 3, S, S)` batch and `(N, 1, S, S)` masks.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let imgs: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&imgs)?, Tensor::stack(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_names() {
        assert_eq!(mask_owner("a_mask"), Some("a"));
        assert_eq!(mask_owner("benign (1)_mask_1"), Some("benign (1)"));
        assert_eq!(mask_owner("a_masked"), None);
        assert_eq!(mask_owner("a_mask_"), None);
        assert_eq!(mask_owner("plain"), None);
    }

    #[test]
    fn sizes() {
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(8), (5, 1, 2));
        assert_eq!(split_sizes(2), (1, 0, 1));
        assert_eq!(split_sizes(1), (1, 0, 0));
        assert_eq!(split_sizes(100), (72, 8, 20));
    }
}
