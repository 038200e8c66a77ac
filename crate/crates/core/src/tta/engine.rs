//! Per-batch marginal-entropy adaptation with model reset.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentationPolicy};
use crate::autograd::{Tape, Var};
use crate::data::LabeledImage;
use crate::encoder::{Bound, Encoder, ModelCheckpoint, ParamMode};
use crate::error::{Error, Result};
use crate::optim::{sgd_step, LrSchedule, OptimizerState};
use crate::proto::{predict, PredictionDistribution, PrototypeBank, Scoring};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Floor applied inside `log` when taking entropies.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetPolicy {
    /// Restore the adapted-model checkpoint before every batch.
    PerBatch,
    /// Carry parameters and optimizer state from batch to batch.
    None,
}

impl ResetPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerBatch => "per-batch",
            Self::None => "none",
        }
    }
}

impl fmt::Display for ResetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-batch" => Ok(Self::PerBatch),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown reset policy `{s}`"))),
        }
    }
}

/// What the final prediction of a sample is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictFrom {
    /// The unaugmented sample.
    #[default]
    Clean,
    /// The marginal over a fresh set of augmented views.
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    /// Augmented views per sample.
    pub m: usize,
    /// Adaptation steps per batch.
    pub n: usize,
    /// Test batch size.
    pub b: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub param_mode: ParamMode,
    pub reset: ResetPolicy,
    pub predict_from: PredictFrom,
    pub augmentation: AugmentationPolicy,
    /// Keys the per-sample augmentation streams.
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 1,
            b: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            param_mode: ParamMode::Norm,
            reset: ResetPolicy::PerBatch,
            predict_from: PredictFrom::Clean,
            augmentation: AugmentationPolicy::default(),
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.b == 0 {
            return Err(Error::Config("m, n and b must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.param_mode == ParamMode::Head {
            return Err(Error::Config("test-time adaptation cannot train a head".into()));
        }
        self.augmentation.validate()
    }
}

/// Key of the augmentation stream of one sample at one iteration.
pub fn view_key(seed: u64, sample_id: u64, iteration: usize) -> u64 {
    derive_seed(&[seed, sample_id, iteration as u64])
}

/// Views `[B][M]` for a batch at one iteration.
pub fn batch_views(batch: &[LabeledImage], cfg: &TtaConfig, iteration: usize) -> Result<Vec<Vec<Tensor>>> {
    batch
        .iter()
        .map(|s| augment(&s.image, &cfg.augmentation, cfg.m, view_key(cfg.seed, s.id, iteration)))
        .collect()
}

/// Records per-view probabilities averaged over views: `[B, K]` from `B`
/// groups of `M` views each.
fn marginal_on_tape(
    tape: &mut Tape,
    encoder: &Encoder,
    bound: &Bound,
    bank: &PrototypeBank,
    views: &[Vec<Tensor>],
) -> Result<Var> {
    let b = views.len();
    let m = views.first().map_or(0, Vec::len);
    if b == 0 || m == 0 {
        return Err(Error::EmptyBatch);
    }
    if views.iter().any(|v| v.len() != m) {
        return Err(Error::Shape { op: "marginal", detail: "samples have different view counts".into() });
    }
    let flat: Vec<Tensor> = views.iter().flatten().cloned().collect();
    let z = encoder.features(tape, bound, &flat)?;
    let z = match bank.scoring() {
        Scoring::Dot => z,
        Scoring::Cosine => tape.l2_normalize(z)?,
    };
    let protos = tape.constant(bank.score_matrix()?)?;
    let logits = tape.matmul(z, protos)?;
    let probs = tape.softmax(logits);
    let k = bank.len();
    let grouped = tape.reshape(probs, &[b, m, k])?;
    tape.mean(grouped, 1)
}

/// Mean over rows of `-sum p log p` for `p` of shape `[B, K]`.
fn mean_entropy_on_tape(tape: &mut Tape, p: Var) -> Var {
    let b = tape.shape(p)[0];
    let log_p = tape.log(p, LOG_FLOOR);
    let plogp = tape.mul(p, log_p).expect("same shape");
    let total = tape.sum(plogp);
    tape.scale(total, -1.0 / b as f64)
}

/// Marginal class distribution of one sample over its views.
pub fn marginal_distribution(
    encoder: &Encoder,
    bank: &PrototypeBank,
    views: &[Tensor],
) -> Result<PredictionDistribution> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, &[])?;
    let p = marginal_on_tape(&mut tape, encoder, &bound, bank, &[views.to_vec()])?;
    Ok(PredictionDistribution::new(bank.class_ids(), tape.value(p).data().to_vec()))
}

/// Batch loss (mean marginal entropy) and its gradient with respect to the
/// parameters at `trainable`.
pub fn batch_loss_and_grad(
    encoder: &Encoder,
    bank: &PrototypeBank,
    views: &[Vec<Tensor>],
    trainable: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, trainable)?;
    let p = marginal_on_tape(&mut tape, encoder, &bound, bank, views)?;
    let loss = mean_entropy_on_tape(&mut tape, p);
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "marginal_entropy" });
    }
    let grads = tape.backward(loss)?;
    let grads = trainable
        .iter()
        .map(|&i| grads.get_or_zeros(bound.var(i), encoder.params().entry(i).value.shape()))
        .collect();
    Ok((value, grads))
}

/// Batch loss only.
pub fn batch_loss(encoder: &Encoder, bank: &PrototypeBank, views: &[Vec<Tensor>]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, &[])?;
    let p = marginal_on_tape(&mut tape, encoder, &bound, bank, views)?;
    let loss = mean_entropy_on_tape(&mut tape, p);
    tape.value(loss).item()
}

/// Fresh optimizer for the parameters `cfg` adapts.
pub fn tta_optimizer(encoder: &Encoder, cfg: &TtaConfig) -> Result<(Vec<usize>, OptimizerState)> {
    let trainable = encoder.select_parameters(cfg.param_mode);
    let shapes: Vec<&[usize]> = trainable.iter().map(|&i| encoder.params().entry(i).value.shape()).collect();
    let opt = OptimizerState::new(&shapes, cfg.momentum, cfg.lr, LrSchedule::Constant)?
        .with_weight_decay(cfg.weight_decay);
    Ok((trainable, opt))
}

fn adapt_with_state(
    encoder: &mut Encoder,
    batch: &[LabeledImage],
    bank: &PrototypeBank,
    cfg: &TtaConfig,
    trainable: &[usize],
    opt: &mut OptimizerState,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for it in 0..cfg.n {
        let views = batch_views(batch, cfg, it)?;
        let (_, grads) = batch_loss_and_grad(encoder, bank, &views, trainable)?;
        let mut params = encoder.params_mut().values_mut(trainable);
        sgd_step(&mut params, &grads, opt, it)?;
    }
    Ok(())
}

/// `cfg.n` entropy-minimization steps on one batch with a fresh optimizer.
pub fn adapt_on_batch(
    encoder: &mut Encoder,
    batch: &[LabeledImage],
    bank: &PrototypeBank,
    cfg: &TtaConfig,
) -> Result<()> {
    cfg.validate()?;
    let (trainable, mut opt) = tta_optimizer(encoder, cfg)?;
    adapt_with_state(encoder, batch, bank, cfg, &trainable, &mut opt)
}

/// Class predictions of the current model for `batch`.
pub fn predict_batch(
    encoder: &Encoder,
    batch: &[LabeledImage],
    bank: &PrototypeBank,
) -> Result<Vec<PredictionDistribution>> {
    let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
    encoder.encode_batch(&images)?.iter().map(|z| predict(z, bank)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch: usize,
    pub size: usize,
    /// Mean entropy of clean-sample predictions before adaptation.
    pub pre_entropy: f64,
    pub post_entropy: f64,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    pub param_mode: ParamMode,
    pub n: usize,
    pub m: usize,
    pub b: usize,
    pub lr: f64,
}

pub fn batch_log_csv(logs: &[BatchLog]) -> String {
    let mut out = String::from("batch,size,pre_entropy,post_entropy,pre_accuracy,post_accuracy,param_mode,n,m,b,lr\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            l.batch, l.size, l.pre_entropy, l.post_entropy, l.pre_accuracy, l.post_accuracy, l.param_mode, l.n, l.m, l.b, l.lr
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TtaOutput {
    /// Predicted class per sample, in input order.
    pub predictions: Vec<usize>,
    /// Predictions of the model each batch started from, in input order.
    pub pre_predictions: Vec<usize>,
    pub logs: Vec<BatchLog>,
}

impl TtaOutput {
    pub fn accuracy(&self, samples: &[LabeledImage]) -> f64 {
        accuracy(&self.predictions, samples)
    }
}

pub fn accuracy(predictions: &[usize], samples: &[LabeledImage]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    correct as f64 / samples.len() as f64
}

fn mean_entropy(dists: &[PredictionDistribution]) -> f64 {
    dists.iter().map(PredictionDistribution::entropy).sum::<f64>() / dists.len() as f64
}

struct BatchResult {
    pre: Vec<usize>,
    post: Vec<usize>,
    log: BatchLog,
}

/// Adapts the current model on one batch, then predicts it.
fn run_batch(
    encoder: &mut Encoder,
    index: usize,
    batch: &[LabeledImage],
    bank: &PrototypeBank,
    cfg: &TtaConfig,
    trainable: &[usize],
    opt: &mut OptimizerState,
) -> Result<BatchResult> {
    let pre = predict_batch(encoder, batch, bank)?;
    adapt_with_state(encoder, batch, bank, cfg, trainable, opt)?;
    let post = match cfg.predict_from {
        PredictFrom::Clean => predict_batch(encoder, batch, bank)?,
        PredictFrom::Marginal => batch_views(batch, cfg, cfg.n)?
            .iter()
            .map(|views| marginal_distribution(encoder, bank, views))
            .collect::<Result<_>>()?,
    };
    let pre_labels: Vec<usize> = pre.iter().map(PredictionDistribution::argmax).collect();
    let post_labels: Vec<usize> = post.iter().map(PredictionDistribution::argmax).collect();
    let log = BatchLog {
        batch: index,
        size: batch.len(),
        pre_entropy: mean_entropy(&pre),
        post_entropy: mean_entropy(&post),
        pre_accuracy: accuracy(&pre_labels, batch),
        post_accuracy: accuracy(&post_labels, batch),
        param_mode: cfg.param_mode,
        n: cfg.n,
        m: cfg.m,
        b: cfg.b,
        lr: cfg.lr,
    };
    Ok(BatchResult { pre: pre_labels, post: post_labels, log })
}

/// Splits `samples` into batches of `cfg.b` in the given order, adapts on and
/// predicts every batch. With per-batch reset each batch starts from
/// `e_star` on its own model replica, in parallel; without reset batches run
/// in order on one model. `encoder` is left equal to `e_star` either way.
pub fn predict_with_reset(
    encoder: &mut Encoder,
    e_star: &ModelCheckpoint,
    samples: &[LabeledImage],
    bank: &PrototypeBank,
    cfg: &TtaConfig,
) -> Result<TtaOutput> {
    cfg.validate()?;
    encoder.params().check_schema(e_star)?;
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    encoder.params_mut().restore(e_star)?;
    let batches: Vec<&[LabeledImage]> = samples.chunks(cfg.b).collect();

    let results: Vec<BatchResult> = match cfg.reset {
        ResetPolicy::PerBatch => {
            let template: &Encoder = encoder;
            batches
                .par_iter()
                .enumerate()
                .map(|(i, batch)| {
                    let mut replica = template.clone();
                    replica.params_mut().restore(e_star)?;
                    let (trainable, mut opt) = tta_optimizer(&replica, cfg)?;
                    run_batch(&mut replica, i, batch, bank, cfg, &trainable, &mut opt)
                })
                .collect::<Result<_>>()?
        }
        ResetPolicy::None => {
            let (trainable, mut opt) = tta_optimizer(encoder, cfg)?;
            let mut out = Vec::with_capacity(batches.len());
            for (i, batch) in batches.iter().enumerate() {
                match run_batch(encoder, i, batch, bank, cfg, &trainable, &mut opt) {
                    Ok(r) => out.push(r),
                    Err(e) => {
                        encoder.params_mut().restore(e_star)?;
                        return Err(e);
                    }
                }
            }
            encoder.params_mut().restore(e_star)?;
            out
        }
    };

    let mut output = TtaOutput {
        predictions: Vec::with_capacity(samples.len()),
        pre_predictions: Vec::with_capacity(samples.len()),
        logs: Vec::with_capacity(results.len()),
    };
    for r in results {
        output.predictions.extend(r.post);
        output.pre_predictions.extend(r.pre);
        output.logs.push(r.log);
    }
    Ok(output)
}
