use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{shape_err, Result};

const GRATING_AMPLITUDE: f64 = 34.0;
const BLOB_AMPLITUDE: f64 = 26.0;
const NOISE_STD: f64 = 44.0;
const MAX_SHIFT: i64 = 2;

/// Class signal shared by every split: an oriented grating and a coloured
/// blob, both placed by class index alone.
struct ClassPattern {
    angle: f64,
    cycles: f64,
    colour: Vec<f64>,
    blob: (f64, f64),
}

impl ClassPattern {
    fn new(class: usize, classes: usize, channels: usize) -> Self {
        let t = class as f64 / classes as f64;
        let colour = (0..channels)
            .map(|ch| 0.6 + 0.4 * (2.0 * PI * (t + ch as f64 / channels as f64)).cos())
            .collect();
        let ring = 2.0 * PI * t + PI / 4.0;
        Self {
            angle: PI * t,
            cycles: 3.0 + (class % 2) as f64,
            colour,
            blob: (0.5 + 0.28 * ring.cos(), 0.5 + 0.28 * ring.sin()),
        }
    }

    fn value(&self, ch: usize, y: f64, x: f64, h: usize, w: usize) -> f64 {
        let (u, v) = (x / w as f64, y / h as f64);
        let phase = 2.0 * PI * self.cycles * (u * self.angle.cos() + v * self.angle.sin());
        let (bx, by) = self.blob;
        let d2 = (u - bx).powi(2) + (v - by).powi(2);
        let blob = (-d2 / (2.0 * 0.12f64.powi(2))).exp();
        self.colour[ch] * (GRATING_AMPLITUDE * phase.sin() + BLOB_AMPLITUDE * blob)
    }
}

/// Deterministic labelled images: per-class pattern, random shift and
/// contrast per sample, additive Gaussian noise. Samples are grouped by
/// class in label order.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    (channels, height, width): (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(shape_err!("synthetic data needs at least 2 classes, got {classes}"));
    }
    if per_class == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(shape_err!("synthetic sizes must be positive"));
    }
    let patterns: Vec<_> = (0..classes).map(|c| ClassPattern::new(c, classes, channels)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut pixels = Vec::with_capacity(classes * per_class * channels * height * width);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, pattern) in patterns.iter().enumerate() {
        for _ in 0..per_class {
            let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
            let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
            let contrast = rng.random_range(0.7..1.1);
            let brightness = rng.random_range(-15.0..15.0);
            for ch in 0..channels {
                for y in 0..height {
                    for x in 0..width {
                        let signal = pattern.value(ch, y as f64 - dy, x as f64 - dx, height, width);
                        let v = 128.0 + brightness + contrast * signal + noise.sample(&mut rng);
                        pixels.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(class);
        }
    }
    Dataset::new((channels, height, width), pixels, labels, classes)
}
