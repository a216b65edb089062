use std::f64::consts::PI;

use rand::Rng;

use super::{Dataset, ImageShape};
use crate::error::{ensure, Result};
use crate::rng::{normal_vec, stream};

/// Class-specific glyph geometry: a bar through the centre plus an offset blob.
struct Glyph {
    bar_angle: f64,
    blob_angle: f64,
}

impl Glyph {
    fn for_class(c: usize) -> Self {
        // golden-ratio spacing keeps neighbouring classes far apart
        let phi = 0.618_033_988_749_895;
        Glyph { bar_angle: (c as f64 * phi).fract() * PI, blob_angle: (c as f64 * phi * 0.5 + 0.13).fract() * 2.0 * PI }
    }
}

fn render(glyph: &Glyph, side: usize, rng: &mut crate::rng::Stream) -> Vec<f32> {
    let s = side as f64;
    let centre = s / 2.0;
    let angle = glyph.bar_angle + rng.random_range(-0.1..0.1);
    let shift = (rng.random_range(-s / 16.0..=s / 16.0), rng.random_range(-s / 16.0..=s / 16.0));
    let half_len = 0.34 * s * rng.random_range(0.85..1.1);
    let thickness = (s / 14.0).max(0.6) * rng.random_range(0.8..1.25);
    let blob_r = 0.27 * s;
    let blob_at = (
        centre + shift.0 + blob_r * glyph.blob_angle.cos(),
        centre + shift.1 + blob_r * glyph.blob_angle.sin(),
    );
    let blob_sigma = s / 10.0 * rng.random_range(0.85..1.15);
    let intensity = rng.random_range(0.8..1.0);
    let (dir_x, dir_y) = (angle.cos(), angle.sin());
    let noise = normal_vec(rng, side * side, 0.04);
    let mut out = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64 + 0.5 - centre - shift.0, row as f64 + 0.5 - centre - shift.1);
            let along = (x * dir_x + y * dir_y).clamp(-half_len, half_len);
            let (px, py) = (x - along * dir_x, y - along * dir_y);
            let bar = (1.0 - ((px * px + py * py).sqrt() - thickness).max(0.0)).clamp(0.0, 1.0);
            let (bx, by) = (col as f64 + 0.5 - blob_at.0, row as f64 + 0.5 - blob_at.1);
            let blob = (-(bx * bx + by * by) / (2.0 * blob_sigma * blob_sigma)).exp();
            let v = intensity * bar.max(blob) + noise[row * side + col];
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Deterministic parametric glyph dataset used when no real data is at hand.
///
/// Class `c` is a bar at a class-specific angle plus a blob at a
/// class-specific position; every example adds small geometric jitter and
/// Gaussian pixel noise drawn from the seeded stream.
pub fn make_synthetic(n_classes: usize, per_class: usize, image_side: usize, seed: u64) -> Result<Dataset> {
    ensure!(n_classes >= 1 && per_class >= 1 && image_side >= 1, Argument, "synthetic dataset sizes must be >= 1");
    let mut rng = stream(seed);
    let mut pixels = Vec::with_capacity(n_classes * per_class * image_side * image_side);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let glyph = Glyph::for_class(c);
        for _ in 0..per_class {
            pixels.extend(render(&glyph, image_side, &mut rng));
            labels.push(c);
        }
    }
    Dataset::new(format!("synthetic-{n_classes}x{per_class}-s{seed}"), ImageShape::gray(image_side), n_classes, pixels, labels)
}
