//! Seeded synthetic image classes: each class is a smooth low-frequency
//! pattern, samples add Gaussian pixel noise and are clipped to [0, 1].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{ImageShape, LabeledImageSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            height: 28,
            width: 28,
            channels: 1,
            noise: 0.25,
            seed: 0,
        }
    }
}

const WAVES_PER_CLASS: usize = 3;

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amplitude: f64,
    channel_gain: Vec<f64>,
}

fn class_pattern(shape: ImageShape, rng: &mut impl Rng) -> Vec<f64> {
    let waves: Vec<Wave> = (0..WAVES_PER_CLASS)
        .map(|_| Wave {
            fy: rng.gen_range(0..=3) as f64,
            fx: rng.gen_range(0..=3) as f64,
            phase: rng.gen_range(0.0..2.0 * PI),
            amplitude: rng.gen_range(0.5..1.0),
            channel_gain: (0..shape.channels).map(|_| rng.gen_range(0.5..1.0)).collect(),
        })
        .collect();
    let mut out = Vec::with_capacity(shape.len());
    for y in 0..shape.height {
        for x in 0..shape.width {
            for c in 0..shape.channels {
                let v: f64 = waves
                    .iter()
                    .map(|w| {
                        let t = 2.0 * PI
                            * (w.fy * y as f64 / shape.height as f64
                                + w.fx * x as f64 / shape.width as f64)
                            + w.phase;
                        w.amplitude * w.channel_gain[c] * t.cos()
                    })
                    .sum();
                out.push(v);
            }
        }
    }
    // rescale into [0.1, 0.9]
    let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    out.iter_mut().for_each(|v| *v = 0.1 + 0.8 * (*v - lo) / span);
    out
}

/// Generates `classes × per_class` samples, interleaved by class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<LabeledImageSet> {
    if spec.classes < 2 {
        return Err(Error::domain("synthetic data needs at least 2 classes"));
    }
    if spec.per_class == 0 || spec.height == 0 || spec.width == 0 || spec.channels == 0 {
        return Err(Error::domain("synthetic data needs non-empty images and classes"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::domain("synthetic noise must be a finite non-negative number"));
    }
    let shape = ImageShape {
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| class_pattern(shape, &mut rng))
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut images = Vec::with_capacity(spec.classes * spec.per_class * shape.len());
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for _ in 0..spec.per_class {
        for (c, pattern) in patterns.iter().enumerate() {
            for &p in pattern {
                let noise = if spec.noise > 0.0 {
                    spec.noise * normal.sample(&mut rng)
                } else {
                    0.0
                };
                images.push((p + noise).clamp(0.0, 1.0));
            }
            labels.push(c as u32);
        }
    }
    LabeledImageSet::new(
        shape,
        images,
        labels,
        (0..spec.classes).map(|c| format!("pattern-{c}")).collect(),
    )
}
