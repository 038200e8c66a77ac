//! Supervised adapter training with a temporary linear head.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::LabeledImage;
use crate::encoder::{Encoder, ModelCheckpoint, ParamGroup, ParamMode};
use crate::error::{Error, Result};
use crate::optim::{sgd_step, LrSchedule, OptimizerState};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Config {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl Phase1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be finite and >= 0", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the loss of the initial model, before any step.
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub mean_loss: f64,
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,mean_loss\n");
    for row in log {
        let _ = writeln!(out, "{},{},{}", row.epoch, row.lr, row.mean_loss);
    }
    out
}

/// Appends a zero-initialized linear head `d -> classes`.
pub fn attach_head(encoder: &mut Encoder, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!("a head needs at least 2 classes, got {classes}")));
    }
    if encoder.params().get(HEAD_WEIGHT).is_some() {
        return Err(Error::Config("encoder already has a head".into()));
    }
    let d = encoder.embed_dim();
    let store = encoder.params_mut();
    store.push(HEAD_WEIGHT, ParamGroup::Head, Tensor::zeros(&[d, classes]))?;
    store.push(HEAD_BIAS, ParamGroup::Head, Tensor::zeros(&[classes]))?;
    Ok(())
}

pub fn detach_head(encoder: &mut Encoder) {
    encoder.params_mut().remove_group(ParamGroup::Head);
}

/// Batch-averaged `-log softmax(logits)[label]` for logits `[B, K]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (b, k) = match shape[..] {
        [b, k] => (b, k),
        _ => return Err(Error::Shape { op: "cross_entropy", detail: format!("logits {shape:?}") }),
    };
    if labels.len() != b {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("{} labels for {b} rows", labels.len()),
        });
    }
    let mut one_hot = vec![0.0; b * k];
    for (row, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        one_hot[row * k + y] = 1.0;
    }
    let target = tape.constant(Tensor::new(vec![b, k], one_hot)?)?;
    let log_p = tape.log_softmax(logits);
    let picked = tape.mul(log_p, target)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / b as f64))
}

fn head_logits(encoder: &Encoder, tape: &mut Tape, bound: &crate::encoder::Bound, images: &[Tensor]) -> Result<Var> {
    let params = encoder.params();
    let (w, b) = match (params.index_of(HEAD_WEIGHT), params.index_of(HEAD_BIAS)) {
        (Some(w), Some(b)) => (bound.var(w), bound.var(b)),
        _ => return Err(Error::Config("encoder has no head attached".into())),
    };
    let z = encoder.features(tape, bound, images)?;
    let zw = tape.matmul(z, w)?;
    tape.add(zw, b)
}

/// Mean cross-entropy of the current model over `samples`, evaluated in
/// batches.
fn dataset_loss(encoder: &Encoder, samples: &[LabeledImage], targets: &[usize], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, ys) in samples.chunks(batch).zip(targets.chunks(batch)) {
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape, &[])?;
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let logits = head_logits(encoder, &mut tape, &bound, &images)?;
        let loss = cross_entropy(&mut tape, logits, ys)?;
        total += tape.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains the parameters in `mode` plus a fresh head over `classes` on
/// `samples`, then discards the head. Mini-batches are reshuffled every epoch
/// from the config seed; the last partial batch is kept.
pub fn train_supervised(
    encoder: &mut Encoder,
    samples: &[LabeledImage],
    classes: &[usize],
    mode: ParamMode,
    cfg: &Phase1Config,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = samples
        .iter()
        .map(|s| {
            classes
                .iter()
                .position(|&c| c == s.label)
                .ok_or(Error::LabelOutOfRange { label: s.label, classes: classes.len() })
        })
        .collect::<Result<Vec<usize>>>()?;

    attach_head(encoder, classes.len())?;
    let result = train_with_head(encoder, samples, &targets, mode, cfg);
    detach_head(encoder);
    result
}

fn train_with_head(
    encoder: &mut Encoder,
    samples: &[LabeledImage],
    targets: &[usize],
    mode: ParamMode,
    cfg: &Phase1Config,
) -> Result<Vec<EpochLog>> {
    let mut trainable = encoder.select_parameters(mode);
    trainable.extend(encoder.select_parameters(ParamMode::Head));
    trainable.sort_unstable();
    trainable.dedup();

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let shapes: Vec<Vec<usize>> =
        trainable.iter().map(|&i| encoder.params().entry(i).value.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = OptimizerState::new(&shape_refs, cfg.momentum, cfg.base_lr, LrSchedule::Cosine { total_steps })?
        .with_weight_decay(cfg.weight_decay);

    let mut log = vec![EpochLog {
        epoch: 0,
        lr: opt.lr_at(0),
        mean_loss: dataset_loss(encoder, samples, targets, cfg.batch_size)?,
    }];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64])));
        let first_lr = opt.lr_at(step);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor> = batch.iter().map(|&i| samples[i].image.clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let bound = encoder.bind(&mut tape, &trainable)?;
            let logits = head_logits(encoder, &mut tape, &bound, &images)?;
            let loss = cross_entropy(&mut tape, logits, &ys)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "cross_entropy" });
            }
            loss_sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = trainable
                .iter()
                .zip(&shapes)
                .map(|(&i, s)| grads.get_or_zeros(bound.var(i), s))
                .collect();
            let mut params = encoder.params_mut().values_mut(&trainable);
            sgd_step(&mut params, &grads, &mut opt, step)?;
            step += 1;
        }
        log.push(EpochLog { epoch, lr: first_lr, mean_loss: loss_sum / samples.len() as f64 });
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct Phase1Output {
    /// The adapted encoder E*, without head.
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
}

/// Trains adapters (and a temporary head) on the first task; backbone and
/// norm parameters stay frozen.
pub fn train_first_session(
    encoder: &mut Encoder,
    samples: &[LabeledImage],
    classes: &[usize],
    cfg: &Phase1Config,
) -> Result<Phase1Output> {
    let log = train_supervised(encoder, samples, classes, ParamMode::Adapter, cfg)?;
    Ok(Phase1Output { checkpoint: encoder.params().snapshot(), log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{finite_diff_gradient, max_relative_error};
    use crate::data::synth::{synth_dataset, SynthSpec};
    use crate::encoder::EncoderConfig;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig { image_size: 8, patch_size: 4, embed_dim: 16, depth: 2, heads: 2, ..Default::default() }
    }

    fn encoder(seed: u64) -> Encoder {
        Encoder::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn samples(n_per_class: usize) -> Vec<LabeledImage> {
        let ds = synth_dataset(&SynthSpec {
            classes: 2,
            train_per_class: n_per_class,
            test_per_class: 0,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        ds.train
    }

    fn ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![labels.len(), k], logits.to_vec()).unwrap(), false).unwrap();
        let l = cross_entropy(&mut tape, x, labels).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        assert!((ce(&[0.3; 4], 4, &[2]) - 4f64.ln()).abs() < 1e-12);
        assert!((ce(&[0.0; 8], 4, &[0, 3]) - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_as_true_logit_grows() {
        let mut prev = f64::INFINITY;
        for m in 0..10 {
            let l = ce(&[m as f64 * 0.5, 0.0, 0.0], 3, &[0]);
            assert!(l < prev);
            prev = l;
        }
        assert!(matches!(
            {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::zeros(&[1, 3]), false).unwrap();
                cross_entropy(&mut tape, x, &[3])
            },
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn gradient_is_softmax_minus_one_hot() {
        let logits = vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3];
        let labels = [2, 0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], logits.clone()).unwrap(), true).unwrap();
        let l = cross_entropy(&mut tape, x, &labels).unwrap();
        let g = tape.backward(l).unwrap().get(x).unwrap().clone();
        for (row, &y) in labels.iter().enumerate() {
            let r = &logits[row * 3..row * 3 + 3];
            let zmax = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = r.iter().map(|v| (v - zmax).exp()).sum();
            for j in 0..3 {
                let p = (r[j] - zmax).exp() / denom;
                let expect = (p - f64::from(u8::from(j == y))) / 2.0;
                assert!((g.data()[row * 3 + j] - expect).abs() < 1e-12);
            }
        }
        let fd = finite_diff_gradient(
            |p| Ok(ce(p[0].data(), 3, &labels)),
            &[Tensor::new(vec![2, 3], logits).unwrap()],
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(std::slice::from_ref(&g), &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn head_shape_and_isolation() {
        let mut enc = encoder(0);
        assert!(attach_head(&mut enc, 1).is_err());
        attach_head(&mut enc, 5).unwrap();
        assert_eq!(enc.params().get(HEAD_WEIGHT).unwrap().shape(), &[16, 5]);
        assert_eq!(enc.params().get(HEAD_BIAS).unwrap().shape(), &[5]);
        let norm = enc.select_parameters(ParamMode::Norm);
        assert!(norm.iter().all(|&i| enc.params().entry(i).group == ParamGroup::Norm));
        assert!(!norm.contains(&enc.params().index_of(HEAD_WEIGHT).unwrap()));

        // zero head: every input gets ln K
        let s = samples(3);
        let targets: Vec<usize> = s.iter().map(|x| x.label).collect();
        let l = dataset_loss(&enc, &s, &targets, 4).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        // features do not read the head
        let before = enc.encode(&s[0].image).unwrap();
        *enc.params_mut().get_mut(HEAD_WEIGHT).unwrap() = Tensor::full(&[16, 5], 3.0);
        assert_eq!(before, enc.encode(&s[0].image).unwrap());
        detach_head(&mut enc);
        assert!(enc.params().get(HEAD_WEIGHT).is_none());
        assert_eq!(before, enc.encode(&s[0].image).unwrap());
    }

    #[test]
    fn only_adapters_move_and_loss_falls() {
        let mut enc = encoder(1);
        let before = enc.params().snapshot();
        let cfg = Phase1Config { epochs: 8, batch_size: 8, seed: 3, ..Default::default() };
        let out = train_first_session(&mut enc, &samples(12), &[0, 1], &cfg).unwrap();
        assert_eq!(out.log.len(), 9);
        assert!((out.log[0].mean_loss - 2f64.ln()).abs() < 1e-12);
        assert!(out.log[8].mean_loss < out.log[0].mean_loss, "{:?}", out.log);
        assert!(enc.params().get(HEAD_WEIGHT).is_none());
        let mut adapter_moved = false;
        for (a, b) in before.entries().iter().zip(out.checkpoint.entries()) {
            if a.group == ParamGroup::Adapter {
                adapter_moved |= !a.value.bitwise_eq(&b.value);
            } else {
                assert!(a.value.bitwise_eq(&b.value), "{} changed", a.name);
            }
        }
        assert!(adapter_moved);
        assert!(epoch_log_csv(&out.log).starts_with("epoch,lr,mean_loss\n0,0.01,"));
    }

    #[test]
    fn zero_lr_changes_nothing_and_seed_determines_result() {
        let s = samples(6);
        let mut enc = encoder(2);
        let before = enc.params().snapshot();
        let cfg = Phase1Config { epochs: 2, base_lr: 0.0, ..Default::default() };
        let out = train_first_session(&mut enc, &s, &[0, 1], &cfg).unwrap();
        assert_eq!(out.checkpoint, before);

        let cfg = Phase1Config { epochs: 2, batch_size: 5, seed: 9, ..Default::default() };
        let a = train_first_session(&mut encoder(2), &s, &[0, 1], &cfg).unwrap();
        let b = train_first_session(&mut encoder(2), &s, &[0, 1], &cfg).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn rejects_empty_and_foreign_labels() {
        let mut enc = encoder(0);
        let cfg = Phase1Config::default();
        assert!(matches!(train_first_session(&mut enc, &[], &[0, 1], &cfg), Err(Error::EmptyDataset)));
        assert!(matches!(
            train_first_session(&mut enc, &samples(2), &[0, 5], &cfg),
            Err(Error::LabelOutOfRange { label: 1, .. })
        ));
        assert!(enc.params().get(HEAD_WEIGHT).is_none());
        assert!(Phase1Config { epochs: 0, ..cfg.clone() }.validate().is_err());
        assert!(Phase1Config { momentum: 1.0, ..cfg }.validate().is_err());
    }
}
