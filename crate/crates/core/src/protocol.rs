//! The class-incremental protocol: train on the first task, bank prototypes
//! task by task, evaluate on every seen class without task identity.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::corruption::{apply_corruption, CorruptionSpec};
use crate::data::stream::TaskStream;
use crate::data::LabeledImage;
use crate::encoder::{Encoder, EncoderConfig, ModelCheckpoint, ParamMode};
use crate::error::{Error, Result};
use crate::proto::{compute_prototypes, predict, PrototypeBank, Scoring};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::trainer::{train_first_session, train_supervised, EpochLog, Phase1Config};
use crate::tta::engine::{accuracy, predict_with_reset, BatchLog, TtaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Prototypes on the untrained encoder.
    FrozenPc,
    /// Prototypes on the first-session model, no test-time adaptation.
    FirstSessionOnly,
    /// First-session model plus per-batch test-time adaptation.
    Ttacil,
    /// Adapters retrained on every task; earlier prototypes kept as computed.
    FinetuneAdapter,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::FrozenPc, Self::FirstSessionOnly, Self::Ttacil, Self::FinetuneAdapter];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FrozenPc => "frozen-pc",
            Self::FirstSessionOnly => "first-session-only",
            Self::Ttacil => "ttacil",
            Self::FinetuneAdapter => "finetune-adapter",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Order in which the evaluation samples are fed to the adaptation engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalOrder {
    /// Test sets concatenated in task order, so batches are sorted by task.
    #[default]
    ByTask,
    /// One seeded shuffle of the seen test samples per evaluation.
    Shuffled,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub encoder: EncoderConfig,
    pub phase1: Phase1Config,
    pub tta: TtaConfig,
    pub scoring: Scoring,
    pub eval_order: EvalOrder,
    /// Applied to every test sample; training data stays clean.
    pub corruption: Option<CorruptionSpec>,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.phase1.validate()?;
        self.tta.validate()?;
        if let Some(c) = &self.corruption {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Accuracy on all seen classes after each task.
    pub per_task: Vec<f64>,
    /// Mean of `per_task`.
    pub average: f64,
    /// Last entry of `per_task`.
    pub last: f64,
}

pub fn compute_metrics(accuracies: &[f64]) -> Result<MetricsReport> {
    let last = *accuracies.last().ok_or(Error::EmptyMetrics)?;
    if let Some(&bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::AccuracyRange(bad));
    }
    Ok(MetricsReport {
        per_task: accuracies.to_vec(),
        average: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
        last,
    })
}

#[derive(Clone, Debug)]
pub struct ProtocolOutput {
    pub method: Method,
    pub metrics: MetricsReport,
    /// Training curve of every supervised session (one for the first-session
    /// methods, one per task for fine-tuning, none for the frozen encoder).
    pub training_logs: Vec<Vec<EpochLog>>,
    /// Adaptation logs of each evaluation, for the adapting method.
    pub tta_logs: Vec<Vec<BatchLog>>,
    /// Accuracy of the model each batch started from, per evaluation.
    pub pre_adaptation: Option<Vec<f64>>,
}

/// Seeds of the independent random streams of one run.
#[derive(Clone, Copy, Debug)]
pub struct RunSeeds {
    pub init: u64,
    pub phase1: u64,
    pub tta: u64,
    pub eval_order: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            init: derive_seed(&[seed, 1]),
            phase1: derive_seed(&[seed, 2]),
            tta: derive_seed(&[seed, 3]),
            eval_order: derive_seed(&[seed, 4]),
        }
    }
}

/// Encoder after the first session (or untrained), with the cumulative
/// prototype bank after every task.
#[derive(Clone, Debug)]
pub struct Session {
    pub encoder: Encoder,
    pub checkpoint: ModelCheckpoint,
    pub training_log: Option<Vec<EpochLog>>,
    pub banks: Vec<PrototypeBank>,
}

fn check_stream(stream: &TaskStream) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::Stream("stream has no tasks".into()));
    }
    if let Some(t) = stream.tasks.iter().find(|t| t.test.is_empty()) {
        return Err(Error::Stream(format!("task {} has no test samples", t.index)));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in &stream.tasks {
        for &c in &t.classes {
            if !seen.insert(c) {
                return Err(Error::Stream(format!("class {c} appears in more than one task")));
            }
        }
    }
    Ok(())
}

fn encode_all(encoder: &Encoder, samples: &[LabeledImage]) -> Result<Vec<Vec<f64>>> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let chunks: Vec<&[Tensor]> = images.chunks(32).collect();
    let parts = chunks
        .par_iter()
        .map(|c| encoder.encode_batch(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn task_prototypes(encoder: &Encoder, samples: &[LabeledImage], classes: &[usize], bank: &mut PrototypeBank) -> Result<()> {
    let feats = encode_all(encoder, samples)?;
    let pairs: Vec<(&[f64], usize)> = feats.iter().zip(samples).map(|(z, s)| (z.as_slice(), s.label)).collect();
    bank.extend(compute_prototypes(&pairs, classes)?)
}

/// Builds the model every non-fine-tuning method evaluates with: the
/// untrained encoder when `train` is false, otherwise the first-session model.
pub fn prepare_session(stream: &TaskStream, cfg: &ProtocolConfig, seed: u64, train: bool) -> Result<Session> {
    cfg.validate()?;
    check_stream(stream)?;
    let seeds = RunSeeds::new(seed);
    let mut encoder = Encoder::new(cfg.encoder.clone(), &mut ChaCha8Rng::seed_from_u64(seeds.init))?;
    let training_log = if train {
        let first = &stream.tasks[0];
        let p1 = Phase1Config { seed: seeds.phase1, ..cfg.phase1.clone() };
        Some(train_first_session(&mut encoder, &first.train, &first.classes, &p1)?.log)
    } else {
        None
    };
    let mut bank = PrototypeBank::with_scoring(encoder.embed_dim(), cfg.scoring);
    let mut banks = Vec::with_capacity(stream.len());
    for task in &stream.tasks {
        task_prototypes(&encoder, &task.train, &task.classes, &mut bank)?;
        banks.push(bank.clone());
    }
    Ok(Session { checkpoint: encoder.params().snapshot(), encoder, training_log, banks })
}

/// Test samples after corruption, per task.
fn test_sets(stream: &TaskStream, cfg: &ProtocolConfig) -> Result<Vec<Vec<LabeledImage>>> {
    stream
        .tasks
        .iter()
        .map(|t| match &cfg.corruption {
            None => Ok(t.test.clone()),
            Some(spec) => t
                .test
                .par_iter()
                .map(|s| Ok(LabeledImage { image: apply_corruption(&s.image, spec)?, ..s.clone() }))
                .collect(),
        })
        .collect()
}

fn seen_samples(tests: &[Vec<LabeledImage>], t: usize, cfg: &ProtocolConfig, seeds: &RunSeeds) -> Vec<LabeledImage> {
    let mut samples: Vec<LabeledImage> = tests[..=t].iter().flatten().cloned().collect();
    if cfg.eval_order == EvalOrder::Shuffled {
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seeds.eval_order, t as u64])));
    }
    samples
}

fn static_accuracy(features: &[Vec<f64>], samples: &[&LabeledImage], bank: &PrototypeBank) -> Result<f64> {
    let mut correct = 0usize;
    for (z, s) in features.iter().zip(samples) {
        if predict(z, bank)?.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Evaluates a prepared session with `method`, which must be one of the
/// methods that share the session (everything but fine-tuning).
pub fn evaluate_session(
    session: &Session,
    stream: &TaskStream,
    method: Method,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<ProtocolOutput> {
    cfg.validate()?;
    check_stream(stream)?;
    if session.banks.len() != stream.len() {
        return Err(Error::Stream(format!(
            "session has {} banks for {} tasks",
            session.banks.len(),
            stream.len()
        )));
    }
    let seeds = RunSeeds::new(seed);
    let tests = test_sets(stream, cfg)?;
    let training_logs = session.training_log.iter().cloned().collect();
    match method {
        Method::FrozenPc | Method::FirstSessionOnly => {
            if (method == Method::FirstSessionOnly) != session.training_log.is_some() {
                return Err(Error::Config(format!("{method} cannot use this session")));
            }
            let flat: Vec<&LabeledImage> = tests.iter().flatten().collect();
            let owned: Vec<LabeledImage> = flat.iter().map(|s| (*s).clone()).collect();
            let features = encode_all(&session.encoder, &owned)?;
            let mut accs = Vec::with_capacity(stream.len());
            let mut end = 0;
            for (t, bank) in session.banks.iter().enumerate() {
                end += tests[t].len();
                accs.push(static_accuracy(&features[..end], &flat[..end], bank)?);
            }
            Ok(ProtocolOutput {
                method,
                metrics: compute_metrics(&accs)?,
                training_logs,
                tta_logs: Vec::new(),
                pre_adaptation: None,
            })
        }
        Method::Ttacil => {
            if session.training_log.is_none() {
                return Err(Error::Config("ttacil needs a first-session model".into()));
            }
            let tta = TtaConfig { seed: seeds.tta, ..cfg.tta.clone() };
            let mut encoder = session.encoder.clone();
            let mut accs = Vec::with_capacity(stream.len());
            let mut pre = Vec::with_capacity(stream.len());
            let mut logs = Vec::with_capacity(stream.len());
            for (t, bank) in session.banks.iter().enumerate() {
                let samples = seen_samples(&tests, t, cfg, &seeds);
                let out = predict_with_reset(&mut encoder, &session.checkpoint, &samples, bank, &tta)?;
                accs.push(out.accuracy(&samples));
                pre.push(accuracy(&out.pre_predictions, &samples));
                logs.push(out.logs);
            }
            Ok(ProtocolOutput {
                method,
                metrics: compute_metrics(&accs)?,
                training_logs,
                tta_logs: logs,
                pre_adaptation: Some(pre),
            })
        }
        Method::FinetuneAdapter => Err(Error::Config("finetune-adapter trains its own model".into())),
    }
}

/// Adapters trained on every task in turn, each time with a fresh head over
/// that task's classes. Prototypes of a task come from the model right after
/// training on it; evaluation uses the current model.
fn run_finetune(stream: &TaskStream, cfg: &ProtocolConfig, seed: u64) -> Result<ProtocolOutput> {
    cfg.validate()?;
    check_stream(stream)?;
    let seeds = RunSeeds::new(seed);
    let tests = test_sets(stream, cfg)?;
    let mut encoder = Encoder::new(cfg.encoder.clone(), &mut ChaCha8Rng::seed_from_u64(seeds.init))?;
    let mut bank = PrototypeBank::with_scoring(encoder.embed_dim(), cfg.scoring);
    let mut accs = Vec::with_capacity(stream.len());
    let mut training_logs = Vec::with_capacity(stream.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        // the first task trains exactly like the first-session methods
        let task_seed = if t == 0 { seeds.phase1 } else { derive_seed(&[seeds.phase1, t as u64]) };
        let p1 = Phase1Config { seed: task_seed, ..cfg.phase1.clone() };
        training_logs.push(train_supervised(&mut encoder, &task.train, &task.classes, ParamMode::Adapter, &p1)?);
        task_prototypes(&encoder, &task.train, &task.classes, &mut bank)?;
        let samples: Vec<LabeledImage> = tests[..=t].iter().flatten().cloned().collect();
        let features = encode_all(&encoder, &samples)?;
        let refs: Vec<&LabeledImage> = samples.iter().collect();
        accs.push(static_accuracy(&features, &refs, &bank)?);
    }
    Ok(ProtocolOutput {
        method: Method::FinetuneAdapter,
        metrics: compute_metrics(&accs)?,
        training_logs,
        tta_logs: Vec::new(),
        pre_adaptation: None,
    })
}

/// Runs one method end to end on `stream`.
pub fn run_protocol(stream: &TaskStream, method: Method, cfg: &ProtocolConfig, seed: u64) -> Result<ProtocolOutput> {
    match method {
        Method::FinetuneAdapter => run_finetune(stream, cfg, seed),
        Method::FrozenPc => evaluate_session(&prepare_session(stream, cfg, seed, false)?, stream, method, cfg, seed),
        Method::FirstSessionOnly | Method::Ttacil => {
            evaluate_session(&prepare_session(stream, cfg, seed, true)?, stream, method, cfg, seed)
        }
    }
}
