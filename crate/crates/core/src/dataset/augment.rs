use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageShape;
use crate::error::{ensure, Result};

/// Random resized crop plus rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Smallest crop area as a fraction of the image, in `(0, 1]`.
    pub min_scale: f64,
    pub max_rotation_degrees: f64,
}

impl AugmentationSpec {
    /// Crops covering 70-100% of the image and rotations within +-10 degrees.
    pub const PRETRAIN: AugmentationSpec = AugmentationSpec { min_scale: 0.7, max_rotation_degrees: 10.0 };

    pub fn crop_only(min_scale: f64) -> Self {
        AugmentationSpec { min_scale, max_rotation_degrees: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.min_scale > 0.0 && self.min_scale <= 1.0,
            Argument,
            "min_scale must lie in (0, 1], got {}",
            self.min_scale
        );
        ensure!(self.max_rotation_degrees >= 0.0, Argument, "max_rotation_degrees must be >= 0");
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.min_scale == 1.0 && self.max_rotation_degrees == 0.0
    }

    /// Draws one crop/rotation.
    pub fn sample<R: Rng + ?Sized>(&self, shape: ImageShape, rng: &mut R) -> AugmentParams {
        let area_fraction = if self.min_scale < 1.0 { rng.random_range(self.min_scale..=1.0) } else { 1.0 };
        let rotation_degrees = if self.max_rotation_degrees > 0.0 {
            rng.random_range(-self.max_rotation_degrees..=self.max_rotation_degrees)
        } else {
            0.0
        };
        let side = area_fraction.sqrt();
        let (w, h) = (shape.width as f64, shape.height as f64);
        let (half_w, half_h) = (0.5 * side * w, 0.5 * side * h);
        let center_x = if half_w < w - half_w { rng.random_range(half_w..=w - half_w) } else { 0.5 * w };
        let center_y = if half_h < h - half_h { rng.random_range(half_h..=h - half_h) } else { 0.5 * h };
        AugmentParams { area_fraction, rotation_degrees, center_x, center_y }
    }
}

/// One sampled crop: a square (relative to the image aspect) window of
/// `area_fraction` of the image, centred at `(center_x, center_y)` in
/// continuous pixel coordinates, rotated by `rotation_degrees`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub area_fraction: f64,
    pub rotation_degrees: f64,
    pub center_x: f64,
    pub center_y: f64,
}

/// Resamples the crop window back to the full image size with bilinear
/// interpolation; samples falling outside the frame read as 0.
pub fn apply_augmentation(image: &[f32], shape: ImageShape, params: &AugmentParams) -> Vec<f32> {
    assert_eq!(image.len(), shape.numel(), "image size mismatch");
    let (w, h) = (shape.width, shape.height);
    let (wf, hf) = (w as f64, h as f64);
    let side = params.area_fraction.sqrt();
    let (sin, cos) = params.rotation_degrees.to_radians().sin_cos();
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..shape.channels {
        let plane = &image[ch * w * h..(ch + 1) * w * h];
        let at = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                0.0
            } else {
                plane[y as usize * w + x as usize] as f64
            }
        };
        for row in 0..h {
            for col in 0..w {
                let dx = ((col as f64 + 0.5) / wf - 0.5) * side * wf;
                let dy = ((row as f64 + 0.5) / hf - 0.5) * side * hf;
                let sx = params.center_x + cos * dx - sin * dy - 0.5;
                let sy = params.center_y + sin * dx + cos * dy - 0.5;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
                    + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Samples parameters from `rng` and applies them.
pub fn augment_image<R: Rng + ?Sized>(image: &[f32], shape: ImageShape, spec: &AugmentationSpec, rng: &mut R) -> Vec<f32> {
    let params = spec.sample(shape, rng);
    apply_augmentation(image, shape, &params)
}
