//! Class-mean prototypes and the dot-product softmax classifier over them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::kernels;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Mean embedding of one class and the number of samples behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// How features are compared with prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Raw dot products `z . c_k`.
    #[default]
    Dot,
    /// Dot products of L2-normalized features and prototypes.
    Cosine,
}

/// Prototypes of every class seen so far. Existing entries never change.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    dim: usize,
    scoring: Scoring,
    classes: BTreeMap<usize, ClassPrototype>,
}

/// Class probabilities over the bank's classes, in ascending class order.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution {
    classes: Vec<usize>,
    probs: Vec<f64>,
}

impl PredictionDistribution {
    pub fn new(classes: Vec<usize>, probs: Vec<f64>) -> Self {
        assert_eq!(classes.len(), probs.len());
        Self { classes, probs }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, class: usize) -> Option<f64> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|i| self.probs[i])
    }

    /// Most probable class; the lowest class id wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        self.classes[best]
    }

    /// Shannon entropy in nats, with `log` floored at `1e-12`.
    pub fn entropy(&self) -> f64 {
        marginal_entropy(&self.probs)
    }
}

/// `-sum p log p` in nats, with `log` floored at `1e-12`.
pub fn marginal_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(1e-12).ln()).sum::<f64>()
}

/// Per-class mean of `features`, summed in dataset order.
///
/// Every class in `task_classes` needs at least one sample and every label
/// must belong to `task_classes`.
pub fn compute_prototypes(
    features: &[(&[f64], usize)],
    task_classes: &[usize],
) -> Result<BTreeMap<usize, ClassPrototype>> {
    let dim = match features.first() {
        Some((z, _)) => z.len(),
        None => return Err(Error::EmptyClass(task_classes.first().copied().unwrap_or(0))),
    };
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = task_classes
        .iter()
        .map(|&k| (k, (vec![0.0; dim], 0)))
        .collect();
    for (z, y) in features {
        if z.len() != dim {
            return shape_err("compute_prototypes", format!("feature of length {} vs {dim}", z.len()));
        }
        let Some((sum, n)) = sums.get_mut(y) else {
            return Err(Error::LabelOutOfRange {
                label: *y,
                classes: task_classes.len(),
            });
        };
        for (s, v) in sum.iter_mut().zip(z.iter()) {
            *s += v;
        }
        *n += 1;
    }
    sums.into_iter()
        .map(|(k, (sum, n))| {
            if n == 0 {
                return Err(Error::EmptyClass(k));
            }
            let mean = sum.into_iter().map(|s| s / n as f64).collect();
            Ok((k, ClassPrototype { mean, count: n }))
        })
        .collect()
}

impl PrototypeBank {
    pub fn new(dim: usize) -> Self {
        Self::with_scoring(dim, Scoring::Dot)
    }

    pub fn with_scoring(dim: usize, scoring: Scoring) -> Self {
        Self {
            dim,
            scoring,
            classes: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scoring(&self) -> Scoring {
        self.scoring
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    pub fn get(&self, class: usize) -> Option<&ClassPrototype> {
        self.classes.get(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ClassPrototype)> {
        self.classes.iter().map(|(&k, v)| (k, v))
    }

    /// Adds new classes. Fails without modifying the bank if any id is
    /// already present or any prototype has the wrong dimension.
    pub fn extend(&mut self, new: BTreeMap<usize, ClassPrototype>) -> Result<()> {
        for (k, p) in &new {
            if self.classes.contains_key(k) {
                return Err(Error::ClassCollision(*k));
            }
            if p.mean.len() != self.dim {
                return shape_err(
                    "extend_bank",
                    format!("prototype {k} has length {}, bank uses {}", p.mean.len(), self.dim),
                );
            }
        }
        self.classes.extend(new);
        Ok(())
    }

    /// Prototype matrix `[d, K]` (columns in ascending class order) as used
    /// for scoring, i.e. normalized in cosine mode.
    pub fn score_matrix(&self) -> Result<Tensor> {
        if self.classes.is_empty() {
            return Err(Error::EmptyBank);
        }
        let (d, k) = (self.dim, self.classes.len());
        let mut data = vec![0.0; d * k];
        for (j, proto) in self.classes.values().enumerate() {
            let norm = match self.scoring {
                Scoring::Dot => 1.0,
                Scoring::Cosine => kernels::dot(&proto.mean, &proto.mean).sqrt().max(1e-12),
            };
            for i in 0..d {
                data[i * k + j] = proto.mean[i] / norm;
            }
        }
        Tensor::new(vec![d, k], data)
    }

    /// Logits `z . c_k` in ascending class order.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.classes.is_empty() {
            return Err(Error::EmptyBank);
        }
        if z.len() != self.dim {
            return shape_err("predict", format!("feature length {} vs bank dim {}", z.len(), self.dim));
        }
        let z_norm = match self.scoring {
            Scoring::Dot => 1.0,
            Scoring::Cosine => kernels::dot(z, z).sqrt().max(1e-12),
        };
        Ok(self
            .classes
            .values()
            .map(|p| {
                let c_norm = match self.scoring {
                    Scoring::Dot => 1.0,
                    Scoring::Cosine => kernels::dot(&p.mean, &p.mean).sqrt().max(1e-12),
                };
                kernels::dot(z, &p.mean) / (z_norm * c_norm)
            })
            .collect())
    }
}

/// Softmax over the dot products of `z` with every prototype in the bank.
pub fn predict(z: &[f64], bank: &PrototypeBank) -> Result<PredictionDistribution> {
    let logits = bank.logits(z)?;
    let mut probs = vec![0.0; logits.len()];
    kernels::softmax_row(&logits, &mut probs);
    Ok(PredictionDistribution::new(bank.class_ids(), probs))
}
