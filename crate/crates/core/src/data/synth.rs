//! Procedural grayscale texture classes.
//!
//! A class is a (family, frequency) pair. Families are vertical gratings,
//! horizontal gratings, checkerboards, concentric rings and diagonal crosses,
//! all of which map onto themselves under a horizontal flip, so flip
//! augmentations keep labels intact. Each sample jitters phase, frequency,
//! contrast and orientation, then adds pixel noise.

use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, TEST_ID_OFFSET};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const FAMILIES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Std of the additive Gaussian pixel noise.
    pub pixel_noise: f64,
    /// Half-width of the uniform phase jitter, in radians.
    pub phase_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 40,
            test_per_class: 16,
            image_size: 16,
            pixel_noise: 0.05,
            phase_jitter: 0.8,
            seed: 0,
        }
    }
}

/// Cycles per image for the `level`-th frequency band.
fn base_frequency(level: usize) -> f64 {
    1.5 + 1.5 * level as f64
}

fn render(class: usize, size: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let family = class % FAMILIES;
    let freq = base_frequency(class / FAMILIES) * rng.random_range(0.9..1.1);
    let phase1 = rng.random_range(-spec.phase_jitter..=spec.phase_jitter);
    let phase2 = rng.random_range(-spec.phase_jitter..=spec.phase_jitter);
    let contrast = rng.random_range(0.6..1.0);
    let tilt = rng.random_range(-0.1..0.1f64);
    let center = (
        rng.random_range(-1.0..1.0) + (size as f64 - 1.0) / 2.0,
        rng.random_range(-1.0..1.0) + (size as f64 - 1.0) / 2.0,
    );
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).expect("finite noise std");
    let k = 2.0 * PI * freq / size as f64;
    let (sin_t, cos_t) = tilt.sin_cos();

    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 - center.0, y as f64 - center.1);
            // slightly rotated coordinates
            let (u, v) = (cos_t * xf - sin_t * yf, sin_t * xf + cos_t * yf);
            let pattern = match family {
                0 => (k * u + phase1).sin(),
                1 => (k * v + phase1).sin(),
                2 => (k * u + phase1).sin() * (k * v + phase2).sin(),
                3 => (k * (u * u + v * v).sqrt() + phase1).sin(),
                _ => 0.5 * ((k * (u + v) / SQRT_2 + phase1).sin() + (k * (u - v) / SQRT_2 + phase2).sin()),
            };
            let value = 0.5 + 0.5 * contrast * pattern + noise.sample(rng);
            data.push(value.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![size, size, 1], data).expect("square grayscale image")
}

/// Generates balanced train/test splits, in class-major order.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.train_per_class == 0 || spec.image_size == 0 {
        return Err(Error::Config(
            "synthetic dataset needs classes, train_per_class and image_size > 0".into(),
        ));
    }
    let mut train = Vec::with_capacity(spec.classes * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);
    for class in 0..spec.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, class as u64]));
        for _ in 0..spec.train_per_class {
            let id = train.len() as u64;
            train.push(LabeledImage {
                id,
                image: render(class, spec.image_size, spec, &mut rng),
                label: class,
            });
        }
        for _ in 0..spec.test_per_class {
            let id = TEST_ID_OFFSET + test.len() as u64;
            test.push(LabeledImage {
                id,
                image: render(class, spec.image_size, spec, &mut rng),
                label: class,
            });
        }
    }
    Ok(Dataset {
        num_classes: spec.classes,
        train,
        test,
    })
}
