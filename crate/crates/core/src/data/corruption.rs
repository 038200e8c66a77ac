//! Noise-family corruptions at five severity levels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Gaussian,
    Shot,
    Impulse,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [Self::Gaussian, Self::Shot, Self::Impulse];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Shot => "shot",
            Self::Impulse => "impulse",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

/// Per-level strengths for severities 1 through 5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeverityTable {
    /// Gaussian noise std.
    pub gaussian_sigma: [f64; 5],
    /// Shot-noise photon rate; larger is cleaner.
    pub shot_lambda: [f64; 5],
    /// Fraction of pixels replaced by salt or pepper.
    pub impulse_fraction: [f64; 5],
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            gaussian_sigma: [0.08, 0.12, 0.18, 0.26, 0.38],
            shot_lambda: [60.0, 25.0, 12.0, 5.0, 3.0],
            impulse_fraction: [0.03, 0.06, 0.09, 0.17, 0.27],
        }
    }
}

impl SeverityTable {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gaussian_sigma.iter().all(|s| s.is_finite() && *s >= 0.0)
            && self.shot_lambda.iter().all(|l| l.is_finite() && *l > 0.0)
            && self.impulse_fraction.iter().all(|r| (0.0..=1.0).contains(r));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "severity table needs sigma >= 0, lambda > 0 and fraction in [0, 1]".into(),
            ))
        }
    }

    /// Strength parameter of `kind` at `severity` (1-based).
    pub fn strength(&self, kind: CorruptionKind, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Severity(severity));
        }
        let i = usize::from(severity - 1);
        Ok(match kind {
            CorruptionKind::Gaussian => self.gaussian_sigma[i],
            CorruptionKind::Shot => self.shot_lambda[i],
            CorruptionKind::Impulse => self.impulse_fraction[i],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub table: SeverityTable,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            severity,
            seed,
            table: SeverityTable::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.table.validate()?;
        self.table.strength(self.kind, self.severity).map(|_| ())
    }

    pub fn strength(&self) -> Result<f64> {
        self.table.strength(self.kind, self.severity)
    }
}

/// The noise stream depends only on the spec and the image content.
fn image_rng(image: &Tensor, kind: CorruptionKind, seed: u64, strength: f64) -> ChaCha8Rng {
    let mut parts = Vec::with_capacity(image.numel() + 3);
    parts.extend([seed, kind.code(), strength.to_bits()]);
    parts.extend(image.data().iter().map(|v| v.to_bits()));
    ChaCha8Rng::seed_from_u64(derive_seed(&parts))
}

/// Applies `kind` at an explicit strength without clamping the result.
pub fn corrupt_unclamped(image: &Tensor, kind: CorruptionKind, strength: f64, seed: u64) -> Result<Tensor> {
    let mut rng = image_rng(image, kind, seed, strength);
    let data = match kind {
        CorruptionKind::Gaussian => {
            let normal = Normal::new(0.0, strength)
                .map_err(|e| Error::Config(format!("gaussian sigma {strength}: {e}")))?;
            image.data().iter().map(|&x| x + normal.sample(&mut rng)).collect()
        }
        CorruptionKind::Shot => image
            .data()
            .iter()
            .map(|&x| {
                let rate = strength * x.max(0.0);
                if rate > 0.0 {
                    let poisson = Poisson::new(rate)
                        .map_err(|e| Error::Config(format!("shot rate {rate}: {e}")))?;
                    Ok(poisson.sample(&mut rng) / strength)
                } else {
                    Ok(0.0)
                }
            })
            .collect::<Result<Vec<_>>>()?,
        CorruptionKind::Impulse => image
            .data()
            .iter()
            .map(|&x| {
                if rng.random::<f64>() < strength {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    x
                }
            })
            .collect(),
    };
    Tensor::new(image.shape().to_vec(), data)
}

/// Corrupts an image in `[0, 1]`; output is clamped to `[0, 1]`.
pub fn apply_corruption(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut out = corrupt_unclamped(image, spec.kind, spec.strength()?, spec.seed)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}
