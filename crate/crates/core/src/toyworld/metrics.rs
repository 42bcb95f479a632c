//! Quantitative stand-ins for the editing task's two requirements: the
//! edited image should comply with the action prompt, and the object should
//! keep the source's identity (color + texture).
//!
//! Pose compliance is template matching: normalized cross-correlation of the
//! image luminance against the four canonical glyphs over every ±1 jitter.
//! Identity is a 4-dim feature — mean object RGB plus a stripe-contrast
//! statistic — extracted over a luminance-thresholded object mask. Both are
//! computed in f64 display space ([0,1]) from [-1,1] tensors.

use super::{glyph, Pose, BG_LEVELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Object pixels must exceed the estimated background luminance by this much.
/// Picked against the known background levels (max 0.12) and the dimmest
/// striped object rows (≈0.31).
pub const MASK_THRESHOLD: f64 = 0.15;

fn check_image(img: &Tensor<f32>) -> Result<()> {
    if img.shape() != [16, 16, 3] {
        return Err(Error::Dimension(format!("metrics expect [16,16,3], got {:?}", img.shape())));
    }
    Ok(())
}

/// Per-pixel luminance in display space [0,1].
fn luminance(img: &Tensor<f32>) -> Vec<f64> {
    img.data()
        .chunks(3)
        .map(|px| {
            let mean = (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0;
            (mean + 1.0) / 2.0
        })
        .collect()
}

/// Median luminance of the image border; the glyph never reaches it, so this
/// estimates the background level even on generated images.
fn background_level(lum: &[f64]) -> f64 {
    let mut border = Vec::with_capacity(60);
    for y in 0..16usize {
        for x in 0..16usize {
            if y == 0 || y == 15 || x == 0 || x == 15 {
                border.push(lum[y * 16 + x]);
            }
        }
    }
    border.sort_by(|a, b| a.partial_cmp(b).unwrap());
    border[border.len() / 2]
}

/// Classify the arrow pose by normalized cross-correlation against the four
/// canonical 7×7 templates over all nine ±1 jitter placements. Returns the
/// argmax pose and its score (the absolute correlation, in [0,1]).
pub fn pose_classify(img: &Tensor<f32>) -> Result<(Pose, f64)> {
    check_image(img)?;
    let lum = luminance(img);
    let mut best_pose = Pose::Up;
    let mut best_score = f64::MIN;
    for pose in Pose::all() {
        let tpl = glyph(pose);
        let tpl_vals: Vec<f64> =
            tpl.iter().flatten().map(|&on| if on { 1.0 } else { 0.0 }).collect();
        let mut pose_score = 0.0f64;
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let (oy, ox) = ((4 + dy) as usize, (4 + dx) as usize);
                let mut region = Vec::with_capacity(49);
                for gy in 0..7 {
                    for gx in 0..7 {
                        region.push(lum[(oy + gy) * 16 + ox + gx]);
                    }
                }
                pose_score = pose_score.max(ncc(&region, &tpl_vals).abs());
            }
        }
        if pose_score > best_score {
            best_score = pose_score;
            best_pose = pose;
        }
    }
    Ok((best_pose, best_score))
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 1e-12 || vb <= 1e-12 {
        return 0.0;
    }
    num / (va.sqrt() * vb.sqrt())
}

/// Identity features of the object region: mean display-space RGB plus a
/// stripe-contrast statistic (mean |Δluminance| over vertically adjacent
/// in-mask pixel pairs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityFeatures {
    pub mean_rgb: [f64; 3],
    pub stripe_contrast: f64,
}

impl IdentityFeatures {
    pub fn distance(&self, other: &IdentityFeatures) -> f64 {
        let mut acc = 0.0;
        for c in 0..3 {
            let d = self.mean_rgb[c] - other.mean_rgb[c];
            acc += d * d;
        }
        let d = self.stripe_contrast - other.stripe_contrast;
        acc += d * d;
        acc.sqrt()
    }

    /// Reference features of a clean render with the given color/texture
    /// (bright rows at `rgb`, dim rows at `STRIPE_DIM·rgb` for striped).
    pub fn reference(color: super::Color, texture: super::Texture) -> IdentityFeatures {
        let rgb = color.rgb();
        match texture {
            super::Texture::Solid => IdentityFeatures { mean_rgb: rgb, stripe_contrast: 0.0 },
            super::Texture::Striped => {
                let f = (1.0 + super::STRIPE_DIM) / 2.0;
                let lum: f64 = rgb.iter().sum::<f64>() / 3.0;
                IdentityFeatures {
                    mean_rgb: [rgb[0] * f, rgb[1] * f, rgb[2] * f],
                    stripe_contrast: (1.0 - super::STRIPE_DIM) * lum,
                }
            }
        }
    }
}

/// Extract identity features; `None` when the luminance mask is empty.
pub fn identity_features(img: &Tensor<f32>) -> Result<Option<IdentityFeatures>> {
    check_image(img)?;
    let lum = luminance(img);
    let bg = background_level(&lum);
    let mask: Vec<bool> = lum.iter().map(|&l| l >= bg + MASK_THRESHOLD).collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let mut mean = [0.0f64; 3];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..3 {
                mean[c] += (img.data()[i * 3 + c] as f64 + 1.0) / 2.0;
            }
        }
    }
    for v in &mut mean {
        *v /= count as f64;
    }
    let mut contrast_sum = 0.0;
    let mut pairs = 0usize;
    for y in 0..15usize {
        for x in 0..16usize {
            let (i, j) = (y * 16 + x, (y + 1) * 16 + x);
            if mask[i] && mask[j] {
                contrast_sum += (lum[i] - lum[j]).abs();
                pairs += 1;
            }
        }
    }
    let stripe_contrast = if pairs == 0 { 0.0 } else { contrast_sum / pairs as f64 };
    Ok(Some(IdentityFeatures { mean_rgb: mean, stripe_contrast }))
}

/// Outcome of an identity comparison; an empty object mask is surfaced, not
/// hidden.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum IdentityOutcome {
    Score(f64),
    NoObject,
}

impl IdentityOutcome {
    pub fn score(self) -> Option<f64> {
        match self {
            IdentityOutcome::Score(s) => Some(s),
            IdentityOutcome::NoObject => None,
        }
    }
}

/// Euclidean distance between the identity features of two images;
/// lower = better preserved.
pub fn identity_score(src: &Tensor<f32>, edited: &Tensor<f32>) -> Result<IdentityOutcome> {
    let (a, b) = (identity_features(src)?, identity_features(edited)?);
    match (a, b) {
        (Some(fa), Some(fb)) => Ok(IdentityOutcome::Score(fa.distance(&fb))),
        _ => Ok(IdentityOutcome::NoObject),
    }
}

/// PSNR in dB over display space; +∞ for identical images.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("psnr on {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x as f64 - y as f64) / 2.0; // [-1,1] → [0,1] halves every difference
        acc += d * d;
    }
    let mse = acc / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
