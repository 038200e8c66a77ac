//! Experiment orchestration and the line-delimited results file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttacil_core::data::corruption::CorruptionSpec;
use ttacil_core::data::idx::load_idx_dataset;
use ttacil_core::data::stream::{build_task_stream, TaskStream};
use ttacil_core::data::synth::synth_dataset;
use ttacil_core::data::Dataset;
use ttacil_core::protocol::{
    evaluate_session, prepare_session, run_protocol, Method, MetricsReport, ProtocolConfig, ProtocolOutput, Session,
};
use ttacil_core::trainer::EpochLog;
use ttacil_core::tta::engine::BatchLog;

use crate::config::{DatasetConfig, ExperimentConfig, Variant};
use crate::error::CliError;

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "TTACIL_WORKERS";

/// One run: a method on one ordering and seed under one test condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub method: Method,
    pub seed: u64,
    pub ordering: u64,
    pub corruption: Option<CorruptionSpec>,
    /// Grid point, for the adapting method only.
    pub variant: Option<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Hex SHA-256 of everything that determines the run.
    pub run_id: String,
    #[serde(flatten)]
    pub spec: RunSpec,
    /// Resolved protocol configuration of this run.
    pub config: ProtocolConfig,
    /// The experiment file the run came from.
    pub experiment: ExperimentConfig,
    pub metrics: MetricsReport,
    pub pre_adaptation: Option<Vec<f64>>,
    pub training_logs: Vec<Vec<EpochLog>>,
    pub tta_logs: Vec<Vec<BatchLog>>,
}

impl RunRecord {
    pub fn base_variant(&self) -> Variant {
        Variant::of(&self.experiment.tta)
    }

    pub fn base_ordering(&self) -> u64 {
        self.experiment.stream.orderings[0]
    }

    /// True unless this is an adapting run off the base grid point.
    pub fn at_base_variant(&self) -> bool {
        self.spec.variant.is_none_or(|v| v == self.base_variant())
    }
}

/// Runs in the order records are written.
pub fn plan(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for &ordering in &cfg.stream.orderings {
        for &seed in &cfg.seeds {
            for corruption in cfg.conditions() {
                for &method in &cfg.methods {
                    let variants = if method == Method::Ttacil { cfg.variants().into_iter().map(Some).collect() } else { vec![None] };
                    for variant in variants {
                        out.push(RunSpec { method, seed, ordering, corruption: corruption.clone(), variant });
                    }
                }
            }
        }
    }
    out
}

/// Protocol configuration a run resolves to.
pub fn resolve(cfg: &ExperimentConfig, spec: &RunSpec) -> ProtocolConfig {
    let mut p = cfg.protocol();
    if let Some(v) = &spec.variant {
        p.tta = v.apply(&p.tta);
    }
    p.corruption = spec.corruption.clone();
    p
}

#[derive(Serialize)]
struct RunKey<'a> {
    spec: &'a RunSpec,
    dataset: &'a DatasetConfig,
    increments: &'a [usize],
    config: &'a ProtocolConfig,
}

pub fn run_id(cfg: &ExperimentConfig, spec: &RunSpec) -> String {
    let config = resolve(cfg, spec);
    let key = RunKey { spec, dataset: &cfg.dataset, increments: &cfg.stream.increments, config: &config };
    let bytes = serde_json::to_vec(&key).expect("run keys serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset, CliError> {
    match cfg {
        DatasetConfig::Synth(spec) => synth_dataset(spec).map_err(CliError::core("building synthetic dataset")),
        DatasetConfig::Idx(p) => load_idx_dataset(&p.train_images, &p.train_labels, &p.test_images, &p.test_labels)
            .map_err(CliError::core("loading idx dataset")),
    }
}

/// Worker count from the environment; unset or 0 means one per core.
pub fn workers_from_env() -> Result<usize, CliError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(0),
        Ok(v) => v.trim().parse().map_err(|_| CliError::Config {
            key: WORKERS_ENV.into(),
            message: format!("expected a non-negative integer, got `{v}`"),
        }),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Skip runs whose id is already in the output file.
    pub skip_existing: bool,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub written: usize,
    pub skipped: usize,
    pub output: PathBuf,
}

/// Sessions shared by every non-fine-tuning run of one ordering and seed.
struct Sessions {
    trained: Option<Session>,
    frozen: Option<Session>,
}

fn execute(
    spec: &RunSpec,
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    sessions: &Sessions,
) -> Result<ProtocolOutput, CliError> {
    let protocol = resolve(cfg, spec);
    let context = format!("{} seed {} ordering {}", spec.method, spec.seed, spec.ordering);
    let session = match spec.method {
        Method::FinetuneAdapter => {
            return run_protocol(stream, spec.method, &protocol, spec.seed).map_err(CliError::core(context))
        }
        Method::FrozenPc => sessions.frozen.as_ref(),
        Method::FirstSessionOnly | Method::Ttacil => sessions.trained.as_ref(),
    };
    let session = session.expect("sessions are prepared for every planned method");
    evaluate_session(session, stream, spec.method, &protocol, spec.seed).map_err(CliError::core(context))
}

/// Ids of the records already in `path`.
pub fn existing_ids(path: &Path) -> Result<HashSet<String>, CliError> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    Ok(read_records(path)?.into_iter().map(|r| r.run_id).collect())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Results(format!("{}:{}: malformed record: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Appends records by writing the whole file to a sibling and renaming it
/// over the original, so readers never see a partial line.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<(), CliError> {
    let mut content = if path.exists() {
        fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))?
    } else {
        Vec::new()
    };
    if !content.is_empty() && !content.ends_with(b"\n") {
        content.push(b'\n');
    }
    for r in records {
        serde_json::to_writer(&mut content, r).map_err(|e| CliError::Results(format!("serializing record: {e}")))?;
        content.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(CliError::io(format!("creating {}", tmp.display())))?;
    file.write_all(&content).map_err(CliError::io(format!("writing {}", tmp.display())))?;
    file.sync_all().map_err(CliError::io(format!("syncing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(CliError::io(format!("renaming onto {}", path.display())))
}

/// Runs every planned run not skipped and returns the new records in plan order.
pub fn run_records(cfg: &ExperimentConfig, skip: &HashSet<String>) -> Result<(Vec<RunRecord>, usize), CliError> {
    cfg.validate()?;
    let todo: Vec<(RunSpec, String)> = plan(cfg)
        .into_iter()
        .map(|s| {
            let id = run_id(cfg, &s);
            (s, id)
        })
        .filter(|(_, id)| !skip.contains(id))
        .collect();
    let skipped = plan(cfg).len() - todo.len();
    if todo.is_empty() {
        return Ok((Vec::new(), skipped));
    }

    let dataset = load_dataset(&cfg.dataset)?;
    let mut streams = BTreeMap::new();
    for &o in &cfg.stream.orderings {
        let s = build_task_stream(&dataset, &cfg.stream.increments, o)
            .map_err(CliError::core(format!("building stream for ordering {o}")))?;
        streams.insert(o, s);
    }

    let protocol = cfg.protocol();
    let mut keys: Vec<(u64, u64)> = todo.iter().map(|(s, _)| (s.ordering, s.seed)).collect();
    keys.dedup();
    let needs = |o: u64, seed: u64, methods: &[Method]| {
        todo.iter().any(|(s, _)| s.ordering == o && s.seed == seed && methods.contains(&s.method))
    };
    let sessions: BTreeMap<(u64, u64), Sessions> = keys
        .par_iter()
        .map(|&(o, seed)| {
            let stream = &streams[&o];
            let context = format!("preparing session for seed {seed} ordering {o}");
            let trained = needs(o, seed, &[Method::FirstSessionOnly, Method::Ttacil])
                .then(|| prepare_session(stream, &protocol, seed, true))
                .transpose()
                .map_err(CliError::core(context.clone()))?;
            let frozen = needs(o, seed, &[Method::FrozenPc])
                .then(|| prepare_session(stream, &protocol, seed, false))
                .transpose()
                .map_err(CliError::core(context))?;
            Ok(((o, seed), Sessions { trained, frozen }))
        })
        .collect::<Result<_, CliError>>()?;

    let records = todo
        .par_iter()
        .map(|(spec, id)| {
            let out = execute(spec, cfg, &streams[&spec.ordering], &sessions[&(spec.ordering, spec.seed)])?;
            Ok(RunRecord {
                run_id: id.clone(),
                spec: spec.clone(),
                config: resolve(cfg, spec),
                experiment: cfg.clone(),
                metrics: out.metrics,
                pre_adaptation: out.pre_adaptation,
                training_logs: out.training_logs,
                tta_logs: out.tta_logs,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((records, skipped))
}

/// Runs the experiment and appends its records to `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let skip = if opts.skip_existing { existing_ids(&cfg.output)? } else { HashSet::new() };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| CliError::Results(format!("starting worker pool: {e}")))?;
    let (records, skipped) = pool.install(|| run_records(cfg, &skip))?;
    append_records(&cfg.output, &records)?;
    Ok(RunSummary { written: records.len(), skipped, output: cfg.output.clone() })
}
