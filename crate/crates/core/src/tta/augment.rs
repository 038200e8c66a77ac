//! Label-preserving random image transforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Ranges of the random transform family. Every range collapsing to its
/// neutral value gives the identity policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Area fraction range of the square resized crop.
    pub crop_scale: [f64; 2],
    pub hflip_prob: f64,
    /// Maximum absolute rotation, in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute additive brightness shift.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale: [0.6, 1.0],
            hflip_prob: 0.5,
            rotation_deg: 15.0,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

/// One drawn transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    /// Crop side as a fraction of the image side.
    pub crop_side: f64,
    /// Crop center offset in pixels.
    pub offset: (f64, f64),
    pub flip: bool,
    pub angle: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        crop_side: 1.0,
        offset: (0.0, 0.0),
        flip: false,
        angle: 0.0,
        brightness: 0.0,
        contrast: 1.0,
    };
}

fn symmetric(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            hflip_prob: 0.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        let ok = 0.0 < lo
            && lo <= hi
            && hi <= 1.0
            && (0.0..=1.0).contains(&self.hflip_prob)
            && (0.0..=180.0).contains(&self.rotation_deg)
            && (0.0..=1.0).contains(&self.brightness)
            && (0.0..1.0).contains(&self.contrast);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy {self:?}")))
        }
    }

    pub fn draw(&self, image_size: usize, rng: &mut ChaCha8Rng) -> Transform {
        let [lo, hi] = self.crop_scale;
        let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let crop_side = area.sqrt();
        let slack = (1.0 - crop_side) * image_size as f64 / 2.0;
        let offset = (symmetric(rng, slack), symmetric(rng, slack));
        let flip = self.hflip_prob > 0.0 && rng.random::<f64>() < self.hflip_prob;
        let angle = symmetric(rng, self.rotation_deg.to_radians());
        let brightness = symmetric(rng, self.brightness);
        let contrast = 1.0 + symmetric(rng, self.contrast);
        Transform { crop_side, offset, flip, angle, brightness, contrast }
    }
}

fn sample_bilinear(data: &[f64], h: usize, w: usize, c: usize, ch: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| data[(yy * w + xx) * c + ch];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Applies a transform to an `[H, W, C]` image; the output has the same shape.
pub fn apply_transform(image: &Tensor, t: &Transform) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::Shape { op: "augment", detail: format!("expected [H, W, C], got {s:?}") }),
    };
    let data = image.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = t.angle.sin_cos();
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dx = if t.flip { -dx } else { dx };
            let dy = y as f64 - cy;
            // output pixel -> source pixel: rotate, shrink into the crop, shift
            let rx = (cos * dx - sin * dy) * t.crop_side;
            let ry = (sin * dx + cos * dy) * t.crop_side;
            let (sx, sy) = (cx + t.offset.0 + rx, cy + t.offset.1 + ry);
            for ch in 0..c {
                out[(y * w + x) * c + ch] = sample_bilinear(data, h, w, c, ch, sy, sx);
            }
        }
    }
    if t.contrast != 1.0 || t.brightness != 0.0 {
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        for v in &mut out {
            *v = ((*v - mean) * t.contrast + mean + t.brightness).clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// `m` augmented views of `image`; view `j` is drawn from a stream keyed by
/// `(key, j)`, so the result is a pure function of its arguments.
pub fn augment(image: &Tensor, policy: &AugmentationPolicy, m: usize, key: u64) -> Result<Vec<Tensor>> {
    if m == 0 {
        return Err(Error::Config("at least one augmentation per sample is required".into()));
    }
    let size = image.shape().first().copied().unwrap_or(0);
    (0..m)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[key, j as u64]));
            apply_transform(image, &policy.draw(size, &mut rng))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Tensor {
        Tensor::new(vec![n, n, 1], (0..n * n).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect()).unwrap()
    }

    #[test]
    fn identity_policy_copies_input() {
        let img = ramp(9);
        let views = augment(&img, &AugmentationPolicy::identity(), 4, 17).unwrap();
        assert_eq!(views.len(), 4);
        assert!(views.iter().all(|v| v.bitwise_eq(&img)));
        assert!(apply_transform(&img, &Transform::IDENTITY).unwrap().bitwise_eq(&img));
    }

    #[test]
    fn same_key_same_views_and_zero_m_rejected() {
        let img = ramp(8);
        let p = AugmentationPolicy::default();
        let a = augment(&img, &p, 3, 5).unwrap();
        let b = augment(&img, &p, 3, 5).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
        let c = augment(&img, &p, 3, 6).unwrap();
        assert!(!a[0].bitwise_eq(&c[0]));
        assert!(augment(&img, &p, 0, 5).is_err());
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = ramp(6);
        let t = Transform { flip: true, ..Transform::IDENTITY };
        let out = apply_transform(&img, &t).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(out.data()[y * 6 + x], img.data()[y * 6 + 5 - x]);
            }
        }
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        // 90 degrees about the center maps source (x, y) onto a permuted grid
        let img = ramp(5);
        let t = Transform { angle: std::f64::consts::FRAC_PI_2, ..Transform::IDENTITY };
        let out = apply_transform(&img, &t).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                // source x = cx - dy, source y = cy + dx
                let (sx, sy) = (4 - y, x);
                assert!((out.data()[y * 5 + x] - img.data()[sy * 5 + sx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn photometric_jitter_on_constant_image() {
        let img = Tensor::full(&[4, 4, 1], 0.5);
        let t = Transform { brightness: 0.1, contrast: 1.2, ..Transform::IDENTITY };
        let out = apply_transform(&img, &t).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn invalid_policies() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        assert!(AugmentationPolicy::identity().validate().is_ok());
        let bad = AugmentationPolicy { crop_scale: [0.9, 0.5], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentationPolicy { hflip_prob: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn shape_and_range_preserved(key in any::<u64>(), n in 3usize..12) {
            let img = ramp(n);
            for v in augment(&img, &AugmentationPolicy::default(), 2, key).unwrap() {
                prop_assert_eq!(v.shape(), img.shape());
                prop_assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
