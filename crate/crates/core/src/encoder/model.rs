//! Pre-norm ViT encoder with parallel bottleneck adapters.
//!
//! Block wiring:
//!
//! ```text
//! x = x + Attn(LN1(x))
//! h = LN2(x)
//! x = x + MLP(h) + s * (ReLU(h W_down + b_down) W_up + b_up)
//! ```
//!
//! The feature of an image is the final layer norm applied to the class token.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::EncoderConfig;
use super::params::{ParamGroup, ParamMode, ParameterStore};
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Images encoded per tape when no gradient is needed.
const ENCODE_CHUNK: usize = 32;

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParameterStore,
}

/// Tape handles for every parameter of one forward pass, indexed like the
/// parameter store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub struct MlpVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub enum AdapterScale {
    Fixed(f64),
    Learned(Var),
}

pub struct AdapterVars {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
    pub scale: AdapterScale,
}

/// `MLP(x) + s * (ReLU(x W_down + b_down) W_up + b_up)` for `x` of shape
/// `[rows, d]`. A missing MLP contributes zero.
pub fn adapt_mlp(
    tape: &mut Tape,
    x: Var,
    mlp: Option<&MlpVars>,
    adapter: Option<&AdapterVars>,
) -> Result<Var> {
    let mlp_out = match mlp {
        Some(m) => {
            let h = tape.matmul(x, m.fc1_w)?;
            let h = tape.add(h, m.fc1_b)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, m.fc2_w)?;
            Some(tape.add(h, m.fc2_b)?)
        }
        None => None,
    };
    let adapter_out = match adapter {
        Some(a) => {
            let h = tape.matmul(x, a.down_w)?;
            let h = tape.add(h, a.down_b)?;
            let h = tape.relu(h);
            let h = tape.matmul(h, a.up_w)?;
            let h = tape.add(h, a.up_b)?;
            Some(match a.scale {
                AdapterScale::Fixed(s) => tape.scale(h, s),
                AdapterScale::Learned(s) => tape.scale_by(h, s)?,
            })
        }
        None => None,
    };
    match (mlp_out, adapter_out) {
        (Some(m), Some(a)) => tape.add(m, a),
        (Some(m), None) => Ok(m),
        (None, Some(a)) => Ok(a),
        (None, None) => {
            let zeros = Tensor::zeros(tape.shape(x));
            tape.constant(zeros)
        }
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches")
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches")
}

/// Linear weight with variance `1 / fan_in`.
fn linear(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    uniform(&[fan_in, fan_out], (3.0 / fan_in as f64).sqrt(), rng)
}

impl Encoder {
    /// Randomly initialized encoder. Adapters start with `W_up = 0`, so the
    /// initial function equals the adapter-free backbone.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, p) = (config.embed_dim, config.patch_dim());
        let hidden = config.mlp_hidden();
        let mut s = ParameterStore::new();
        use ParamGroup::{Adapter, Backbone, Norm};

        s.push("patch_embed.weight", Backbone, linear(p, d, rng))?;
        s.push("patch_embed.bias", Backbone, Tensor::zeros(&[d]))?;
        s.push("cls_token", Backbone, normal(&[1, d], 0.02, rng))?;
        s.push("pos_embed", Backbone, normal(&[config.num_tokens(), d], 0.02, rng))?;
        for b in 0..config.depth {
            let pre = format!("blocks.{b}");
            s.push(format!("{pre}.norm1.gamma"), Norm, Tensor::full(&[d], 1.0))?;
            s.push(format!("{pre}.norm1.beta"), Norm, Tensor::zeros(&[d]))?;
            for proj in ["q", "k", "v", "o"] {
                s.push(format!("{pre}.attn.{proj}.weight"), Backbone, linear(d, d, rng))?;
                s.push(format!("{pre}.attn.{proj}.bias"), Backbone, Tensor::zeros(&[d]))?;
            }
            s.push(format!("{pre}.norm2.gamma"), Norm, Tensor::full(&[d], 1.0))?;
            s.push(format!("{pre}.norm2.beta"), Norm, Tensor::zeros(&[d]))?;
            s.push(format!("{pre}.mlp.fc1.weight"), Backbone, linear(d, hidden, rng))?;
            s.push(format!("{pre}.mlp.fc1.bias"), Backbone, Tensor::zeros(&[hidden]))?;
            s.push(format!("{pre}.mlp.fc2.weight"), Backbone, linear(hidden, d, rng))?;
            s.push(format!("{pre}.mlp.fc2.bias"), Backbone, Tensor::zeros(&[d]))?;
            if let Some(a) = &config.adapter {
                let r = a.hidden_dim;
                let bound = 1.0 / (d as f64).sqrt();
                s.push(format!("{pre}.adapter.down.weight"), Adapter, uniform(&[d, r], bound, rng))?;
                s.push(format!("{pre}.adapter.down.bias"), Adapter, Tensor::zeros(&[r]))?;
                s.push(format!("{pre}.adapter.up.weight"), Adapter, Tensor::zeros(&[r, d]))?;
                s.push(format!("{pre}.adapter.up.bias"), Adapter, Tensor::zeros(&[d]))?;
                if a.learnable_scale {
                    s.push(format!("{pre}.adapter.scale"), Adapter, Tensor::scalar(a.scale))?;
                }
            }
        }
        s.push("norm.gamma", Norm, Tensor::full(&[d], 1.0))?;
        s.push("norm.beta", Norm, Tensor::zeros(&[d]))?;
        Ok(Self { config, params: s })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Indices of the parameters trained under `mode`.
    pub fn select_parameters(&self, mode: ParamMode) -> Vec<usize> {
        self.params.select(mode)
    }

    /// Puts every parameter on the tape; those listed in `trainable` require
    /// gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &[usize]) -> Result<Bound> {
        let mut flags = vec![false; self.params.len()];
        for &i in trainable {
            flags[i] = true;
        }
        let vars = self
            .params
            .entries()
            .iter()
            .zip(flags)
            .map(|(e, rg)| tape.leaf(e.value.clone(), rg))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    fn p(&self, bound: &Bound, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("encoder parameter `{name}` missing"));
        bound.var(idx)
    }

    /// Flattens images `[H, W, C]` into non-overlapping patches,
    /// `[B * n_patches, patch * patch * C]`.
    pub fn patchify(&self, images: &[Tensor]) -> Result<Tensor> {
        let c = &self.config;
        let (size, ps, ch) = (c.image_size, c.patch_size, c.channels);
        let per_side = c.patches_per_side();
        let pd = c.patch_dim();
        let (mean, std) = (c.input_mean, c.input_std);
        let mut out = Vec::with_capacity(images.len() * c.num_patches() * pd);
        for img in images {
            if img.shape() != [size, size, ch] {
                return shape_err(
                    "patch_embed",
                    format!("image {:?}, expected {:?}", img.shape(), [size, size, ch]),
                );
            }
            let data = img.data();
            for py in 0..per_side {
                for px in 0..per_side {
                    for y in 0..ps {
                        let row = (py * ps + y) * size + px * ps;
                        out.extend(data[row * ch..(row + ps) * ch].iter().map(|v| (v - mean) / std));
                    }
                }
            }
        }
        Tensor::new(vec![images.len() * c.num_patches(), pd], out)
    }

    /// Token sequence `[B, n_patches + 1, d]`: projected patches with the
    /// class token prepended and position embeddings added.
    pub fn patch_embed(&self, tape: &mut Tape, bound: &Bound, images: &[Tensor]) -> Result<Var> {
        if images.is_empty() {
            return shape_err("patch_embed", "no images");
        }
        let (b, n, d) = (images.len(), self.config.num_patches(), self.config.embed_dim);
        let patches = self.patchify(images)?;
        let patches = tape.constant(patches)?;
        let x = tape.matmul(patches, self.p(bound, "patch_embed.weight"))?;
        let x = tape.add(x, self.p(bound, "patch_embed.bias"))?;
        let x = tape.reshape(x, &[b, n, d])?;
        let cls = tape.broadcast_leading(self.p(bound, "cls_token"), b)?;
        let x = tape.concat(cls, x, 1)?;
        tape.add(x, self.p(bound, "pos_embed"))
    }

    fn layer_norm(&self, tape: &mut Tape, bound: &Bound, x: Var, site: &str) -> Result<Var> {
        let g = self.p(bound, &format!("{site}.gamma"));
        let b = self.p(bound, &format!("{site}.beta"));
        tape.layer_norm(x, g, b, self.config.ln_epsilon)
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, x: Var, name: &str) -> Result<Var> {
        let y = tape.matmul(x, self.p(bound, &format!("{name}.weight")))?;
        tape.add(y, self.p(bound, &format!("{name}.bias")))
    }

    /// Multi-head self-attention over `x` of shape `[B, T, d]`.
    fn attention(&self, tape: &mut Tape, bound: &Bound, x: Var, block: usize) -> Result<Var> {
        let (b, t, d) = match *tape.shape(x) {
            [b, t, d] => (b, t, d),
            ref s => return shape_err("attention", format!("expected [B, T, d], got {s:?}")),
        };
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let flat = tape.reshape(x, &[b * t, d])?;
        let pre = format!("blocks.{block}.attn");
        let mut split = |name: &str| -> Result<Var> {
            let y = self.linear(tape, bound, flat, &format!("{pre}.{name}"))?;
            let y = tape.reshape(y, &[b, t, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[b * h, t, dh])
        };
        let (q, k, v) = (split("q")?, split("k")?, split("v")?);
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores);
        let mixed = tape.batch_matmul(attn, v, false)?;
        let mixed = tape.reshape(mixed, &[b, h, t, dh])?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[b * t, d])?;
        let out = self.linear(tape, bound, mixed, &format!("{pre}.o"))?;
        tape.reshape(out, &[b, t, d])
    }

    fn mlp_vars(&self, bound: &Bound, block: usize) -> MlpVars {
        let pre = format!("blocks.{block}.mlp");
        MlpVars {
            fc1_w: self.p(bound, &format!("{pre}.fc1.weight")),
            fc1_b: self.p(bound, &format!("{pre}.fc1.bias")),
            fc2_w: self.p(bound, &format!("{pre}.fc2.weight")),
            fc2_b: self.p(bound, &format!("{pre}.fc2.bias")),
        }
    }

    fn adapter_vars(&self, bound: &Bound, block: usize) -> Option<AdapterVars> {
        let a = self.config.adapter.as_ref()?;
        let pre = format!("blocks.{block}.adapter");
        let scale = if a.learnable_scale {
            AdapterScale::Learned(self.p(bound, &format!("{pre}.scale")))
        } else {
            AdapterScale::Fixed(a.scale)
        };
        Some(AdapterVars {
            down_w: self.p(bound, &format!("{pre}.down.weight")),
            down_b: self.p(bound, &format!("{pre}.down.bias")),
            up_w: self.p(bound, &format!("{pre}.up.weight")),
            up_b: self.p(bound, &format!("{pre}.up.bias")),
            scale,
        })
    }

    /// One transformer block on `[B, T, d]`.
    pub fn block(&self, tape: &mut Tape, bound: &Bound, x: Var, index: usize) -> Result<Var> {
        let pre = format!("blocks.{index}");
        let h = self.layer_norm(tape, bound, x, &format!("{pre}.norm1"))?;
        let a = self.attention(tape, bound, h, index)?;
        let x = tape.add(x, a)?;

        let shape = tape.shape(x).to_vec();
        let h = self.layer_norm(tape, bound, x, &format!("{pre}.norm2"))?;
        let flat = tape.reshape(h, &[shape[0] * shape[1], shape[2]])?;
        let mlp = self.mlp_vars(bound, index);
        let adapter = self.adapter_vars(bound, index);
        let m = adapt_mlp(tape, flat, Some(&mlp), adapter.as_ref())?;
        let m = tape.reshape(m, &shape)?;
        tape.add(x, m)
    }

    /// Features `[B, d]` for a batch of images.
    pub fn features(&self, tape: &mut Tape, bound: &Bound, images: &[Tensor]) -> Result<Var> {
        let mut x = self.patch_embed(tape, bound, images)?;
        for i in 0..self.config.depth {
            x = self.block(tape, bound, x, i)?;
        }
        // layer norm is per-token, so normalizing only the class token is exact
        let cls = tape.select(x, 1, 0)?;
        self.layer_norm(tape, bound, cls, "norm")
    }

    /// Feature vector of one image.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .encode_batch(std::slice::from_ref(image))?
            .pop()
            .expect("one image in, one feature out"))
    }

    /// Feature vectors of many images. Each row is computed independently, so
    /// results do not depend on how images are grouped.
    pub fn encode_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.embed_dim;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, &[])?;
            let z = self.features(&mut tape, &bound, chunk)?;
            out.extend(tape.value(z).data().chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
