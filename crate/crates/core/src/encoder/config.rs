use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bottleneck adapter attached in parallel to each block's MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub hidden_dim: usize,
    /// Fixed scale `s`, or the initial value when `learnable_scale` is set.
    pub scale: f64,
    pub learnable_scale: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 8,
            scale: 1.0,
            learnable_scale: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub adapter: Option<AdapterConfig>,
    pub ln_epsilon: f64,
    /// Pixels enter the patch projection as `(x - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            adapter: Some(AdapterConfig::default()),
            ln_epsilon: 1e-6,
            input_mean: 0.5,
            input_std: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return fail("image_size, patch_size and channels must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 {
            return fail("embed_dim, depth and heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if !(self.ln_epsilon >= 0.0) {
            return fail(format!("ln_epsilon {} must be >= 0", self.ln_epsilon));
        }
        if !(self.input_mean.is_finite() && self.input_std > 0.0 && self.input_std.is_finite()) {
            return fail(format!(
                "input normalization mean {} std {} must be finite with std > 0",
                self.input_mean, self.input_std
            ));
        }
        if let Some(a) = &self.adapter {
            if a.hidden_dim == 0 || a.hidden_dim >= self.embed_dim {
                return fail(format!(
                    "adapter hidden_dim {} must be in 1..{}",
                    a.hidden_dim, self.embed_dim
                ));
            }
            if !a.scale.is_finite() {
                return fail("adapter scale must be finite".into());
            }
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Adapter parameter count: `depth * (2 d r + r + d)`, plus one scale per
    /// block when the scale is learnable.
    pub fn adapter_param_count(&self) -> usize {
        self.adapter.as_ref().map_or(0, |a| {
            let (d, r) = (self.embed_dim, a.hidden_dim);
            self.depth * (2 * d * r + r + d + usize::from(a.learnable_scale))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_tokens(), 17);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.mlp_hidden(), 128);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = EncoderConfig {
            image_size: 10,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.image_size = 16;
        c.heads = 5;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.adapter = Some(AdapterConfig {
            hidden_dim: 64,
            ..Default::default()
        });
        assert!(c.validate().is_err());
        c.adapter = Some(AdapterConfig::default());
        c.validate().unwrap();
        c.input_std = 0.0;
        assert!(c.validate().is_err());
    }
}
