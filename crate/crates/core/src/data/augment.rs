//! On-the-fly geometric augmentation. Image and mask share one geometric
//! map; the image is resampled bilinearly, the mask by nearest neighbour so
//! it stays binary.

use rand::Rng;

use super::Sample;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const CROP_FRACTION: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    /// Centre crop to `CROP_FRACTION` of each side, then resize back.
    pub crop: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { hflip: false, vflip: false, angle_deg: 0.0, crop: false };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            crop: rng.random_bool(0.5),
        }
    }

    fn warps(&self) -> bool {
        self.angle_deg != 0.0 || self.crop
    }

    /// Apply the transform to an `(N, C, H, W)` tensor.
    pub fn apply(&self, t: &Tensor<f32>, interp: Interp) -> Tensor<f32> {
        let mut out = t.clone();
        if self.hflip || self.vflip {
            out = flip(&out, self.hflip, self.vflip);
        }
        if self.warps() {
            out = warp(&out, self, interp);
        }
        out
    }
}

fn flip(t: &Tensor<f32>, h: bool, v: bool) -> Tensor<f32> {
    let s = t.shape();
    let (hh, ww) = (s.h(), s.w());
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_mut(hh * ww).zip(t.data().chunks(hh * ww)) {
        for y in 0..hh {
            let sy = if v { hh - 1 - y } else { y };
            for x in 0..ww {
                let sx = if h { ww - 1 - x } else { x };
                dst[y * ww + x] = src[sy * ww + sx];
            }
        }
    }
    out
}

/// Inverse map: output pixel -> undo crop zoom -> undo rotation about the centre.
fn warp(t: &Tensor<f32>, p: &AugmentParams, interp: Interp) -> Tensor<f32> {
    let s = t.shape();
    let (hh, ww) = (s.h(), s.w());
    let (cy, cx) = ((hh as f64 - 1.0) / 2.0, (ww as f64 - 1.0) / 2.0);
    let zoom = if p.crop { CROP_FRACTION } else { 1.0 };
    let (sin, cos) = (-p.angle_deg.to_radians()).sin_cos();
    let mut out = vec![0.0f32; t.numel()];
    for (dst, src) in out.chunks_mut(hh * ww).zip(t.data().chunks(hh * ww)) {
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= hh as isize || x >= ww as isize {
                0.0
            } else {
                src[y as usize * ww + x as usize]
            }
        };
        for y in 0..hh {
            for x in 0..ww {
                let (py, px) = ((y as f64 - cy) * zoom, (x as f64 - cx) * zoom);
                let sy = cy + cos * py + sin * px;
                let sx = cx - sin * py + cos * px;
                dst[y * ww + x] = match interp {
                    Interp::Nearest => at(sy.round() as isize, sx.round() as isize),
                    Interp::Bilinear => {
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
                    }
                };
            }
        }
    }
    Tensor::from_vec(s, out).expect("warp shape")
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let p = AugmentParams::draw(rng);
    Sample {
        id: sample.id.clone(),
        image: p.apply(&sample.image, Interp::Bilinear),
        mask: p.apply(&sample.mask, Interp::Nearest),
    }
}
