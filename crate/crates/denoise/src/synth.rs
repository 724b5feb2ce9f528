//! Synthetic grayscale imagery for demos, benchmarks, and tests.
//!
//! Everything here is deterministic in its arguments, so corpora built
//! from the same seeds are identical across runs and machines.

use crate::image_io::GrayImage;
use crate::noise::SeededRng;
use crate::router::ClassLabel;

/// A constant image at `level`.
pub fn flat(height: usize, width: usize, level: f64) -> GrayImage {
    GrayImage::new(height, width, vec![level; height * width])
        .expect("constant image is well-formed")
        .with_source(format!("flat-{level:.3}"))
}

/// Sinusoidal stripes with the given `period` in pixels. Vertical stripes
/// vary along x; horizontal ones along y.
pub fn stripes(
    height: usize,
    width: usize,
    period: f64,
    phase: f64,
    vertical: bool,
    contrast: f64,
) -> GrayImage {
    let omega = std::f64::consts::TAU / period;
    let mut px = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let t = if vertical { x as f64 } else { y as f64 };
            px.push(0.5 + contrast * (omega * t + phase).sin());
        }
    }
    GrayImage::new(height, width, px)
        .expect("stripe image is well-formed")
        .with_source(format!("stripes-p{period:.1}"))
}

/// A two-level checkerboard with square cells of side `cell`.
pub fn checkerboard(height: usize, width: usize, cell: usize, contrast: f64) -> GrayImage {
    let cell = cell.max(1);
    let mut px = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let parity = (y / cell + x / cell) % 2;
            px.push(if parity == 0 {
                0.5 + contrast
            } else {
                0.5 - contrast
            });
        }
    }
    GrayImage::new(height, width, px)
        .expect("checkerboard image is well-formed")
        .with_source(format!("checks-c{cell}"))
}

/// A smooth pseudo-random texture: a few low-frequency plane waves over a
/// mid-gray base, clamped to [0, 1]. Good denoising material — enough
/// structure to learn from, smooth enough that noise dominates error.
pub fn textured(height: usize, width: usize, seed: u64) -> GrayImage {
    let mut rng = SeededRng::new(seed).derive(0x7e57);
    let mut px = vec![0.5; height * width];
    for _ in 0..4 {
        let fy = 0.02 + 0.10 * rng.uniform();
        let fx = 0.02 + 0.10 * rng.uniform();
        let phase = std::f64::consts::TAU * rng.uniform();
        let amp = 0.04 + 0.06 * rng.uniform();
        for y in 0..height {
            for x in 0..width {
                px[y * width + x] +=
                    amp * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
            }
        }
    }
    for v in &mut px {
        *v = v.clamp(0.0, 1.0);
    }
    GrayImage::new(height, width, px)
        .expect("textured image is well-formed")
        .with_source(format!("textured-{seed:04}"))
}

/// `count` distinct textured images with stable ids, for training and
/// evaluation demos.
pub fn demo_corpus(count: usize, height: usize, width: usize, seed: u64) -> Vec<GrayImage> {
    (0..count)
        .map(|i| {
            textured(height, width, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
                .with_source(format!("synth-{i:03}"))
        })
        .collect()
}

/// A labeled corpus over three easily separable texture classes —
/// stripes (0), checkerboards (1), and flat fields (2) — with randomized
/// per-image period, phase, orientation, cell size, and level.
pub fn three_class_corpus(
    per_class: usize,
    side: usize,
    seed: u64,
) -> (Vec<(GrayImage, usize)>, Vec<ClassLabel>) {
    let classes = vec![
        ClassLabel::new(0, "stripes"),
        ClassLabel::new(1, "checks"),
        ClassLabel::new(2, "flat"),
    ];
    let root = SeededRng::new(seed);
    let mut samples = Vec::with_capacity(3 * per_class);
    for i in 0..per_class {
        let mut rng = root.derive(i as u64);
        let period = 6.0 + 10.0 * rng.uniform();
        let phase = std::f64::consts::TAU * rng.uniform();
        let vertical = rng.uniform() < 0.5;
        let img = stripes(side, side, period, phase, vertical, 0.35)
            .with_source(format!("stripes-{i:03}"));
        samples.push((img, 0));

        let cell = 4 + rng.index(9);
        let img = checkerboard(side, side, cell, 0.35).with_source(format!("checks-{i:03}"));
        samples.push((img, 1));

        let level = 0.2 + 0.6 * rng.uniform();
        let img = flat(side, side, level).with_source(format!("flat-{i:03}"));
        samples.push((img, 2));
    }
    (samples, classes)
}
