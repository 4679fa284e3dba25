//! Synthetic ultrasound-like corpus: a dark elliptical lesion on a textured
//! background, both under multiplicative speckle.

use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::sample_rng;
use crate::error::{Error, Result};

/// Guaranteed bounds on the lesion share of each generated image.
pub const SYNTH_FRACTION_RANGE: (f64, f64) = (0.02, 0.40);
const TARGET_FRACTION: (f64, f64) = (0.04, 0.30);
const SPECKLE: f64 = 0.22;

/// One `(image, mask)` pair of side `size`; mask pixels are 0 or 255.
pub fn synth_pair<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (GrayImage, GrayImage) {
    assert!(size >= 16, "synthetic images need size >= 16");
    let s = size as f64;
    let speckle = Normal::new(0.0, SPECKLE).expect("finite");
    loop {
        let frac = rng.random_range(TARGET_FRACTION.0..TARGET_FRACTION.1);
        let ratio = rng.random_range(0.6..1.6);
        let a = (frac * s * s / (std::f64::consts::PI * ratio)).sqrt();
        let b = ratio * a;
        let reach = a.max(b) + 1.0;
        let cy = rng.random_range(reach..s - 1.0 - reach);
        let cx = rng.random_range(reach..s - 1.0 - reach);
        let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();

        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.02..0.12),
                    rng.random_range(-0.12..0.12),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.04..0.1),
                )
            })
            .collect();
        let base = rng.random_range(0.5..0.65);
        let lesion_level = rng.random_range(0.12..0.25);

        let mut mask = GrayImage::new(size as u32, size as u32);
        let mut img = GrayImage::new(size as u32, size as u32);
        let mut inside_count = 0usize;
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let inside = u * u + v * v <= 1.0;
                let mut level = base - 0.15 * y as f64 / s;
                for &(fy, fx, phase, amp) in &waves {
                    level += amp * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
                }
                if inside {
                    inside_count += 1;
                    level = lesion_level;
                }
                let noisy = level * (1.0 + speckle.sample(rng));
                img.put_pixel(x as u32, y as u32, image::Luma([(noisy.clamp(0.0, 1.0) * 255.0).round() as u8]));
                mask.put_pixel(x as u32, y as u32, image::Luma([if inside { 255 } else { 0 }]));
            }
        }
        let share = inside_count as f64 / (s * s);
        if (SYNTH_FRACTION_RANGE.0..=SYNTH_FRACTION_RANGE.1).contains(&share) {
            return (img, mask);
        }
    }
}

/// Write `n` pairs as `images/synth_XXX.png` and `masks/synth_XXX_mask.png`.
/// Each pair depends only on `(seed, index)`.
pub fn write_synthetic_corpus(root: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::Validation("synthetic corpus needs n >= 1".into()));
    }
    if size < 16 {
        return Err(Error::Validation(format!("synthetic image size {size} must be >= 16")));
    }
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("synth_{i:03}");
        let mut rng = sample_rng(seed, 0, &id);
        let (img, mask) = synth_pair(size, &mut rng);
        let ip = img_dir.join(format!("{id}.png"));
        let mp = mask_dir.join(format!("{id}_mask.png"));
        img.save(&ip).map_err(|source| Error::Image { path: ip.clone(), source })?;
        mask.save(&mp).map_err(|source| Error::Image { path: mp.clone(), source })?;
        ids.push(id);
    }
    Ok(ids)
}
