//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttacil_core::data::corruption::{CorruptionKind, CorruptionSpec, SeverityTable};
use ttacil_core::data::synth::SynthSpec;
use ttacil_core::encoder::{EncoderConfig, ParamMode};
use ttacil_core::proto::Scoring;
use ttacil_core::protocol::{EvalOrder, Method, ProtocolConfig};
use ttacil_core::trainer::Phase1Config;
use ttacil_core::tta::engine::{ResetPolicy, TtaConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synth(SynthSpec),
    Idx(IdxPaths),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth(SynthSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Classes per task.
    pub increments: Vec<usize>,
    /// Class-order seeds; each one is a separate task ordering.
    pub orderings: Vec<u64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { increments: vec![2; 5], orderings: vec![0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionEntry {
    pub kind: CorruptionKind,
    pub severity: u8,
}

/// Values swept for the adapting method. An empty axis keeps the value of
/// the `tta` section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub param_mode: Vec<ParamMode>,
    pub n: Vec<usize>,
    pub b: Vec<usize>,
    pub m: Vec<usize>,
    pub reset: Vec<ResetPolicy>,
}

/// One point of the adaptation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub param_mode: ParamMode,
    pub n: usize,
    pub b: usize,
    pub m: usize,
    pub reset: ResetPolicy,
}

impl Variant {
    pub fn of(tta: &TtaConfig) -> Self {
        Self { param_mode: tta.param_mode, n: tta.n, b: tta.b, m: tta.m, reset: tta.reset }
    }

    pub fn apply(&self, tta: &TtaConfig) -> TtaConfig {
        TtaConfig {
            param_mode: self.param_mode,
            n: self.n,
            b: self.b,
            m: self.m,
            reset: self.reset,
            ..tta.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub output: PathBuf,
    /// Also evaluate on clean test data when corruptions are listed.
    pub clean: bool,
    pub dataset: DatasetConfig,
    pub stream: StreamConfig,
    pub encoder: EncoderConfig,
    pub phase1: Phase1Config,
    pub tta: TtaConfig,
    pub scoring: Scoring,
    pub eval_order: EvalOrder,
    pub corruptions: Vec<CorruptionEntry>,
    pub severity_table: SeverityTable,
    /// Seed of the corruption noise.
    pub corruption_seed: u64,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            output: PathBuf::from("results.jsonl"),
            clean: true,
            dataset: DatasetConfig::default(),
            stream: StreamConfig::default(),
            encoder: EncoderConfig::default(),
            phase1: Phase1Config::default(),
            tta: TtaConfig::default(),
            scoring: Scoring::default(),
            eval_order: EvalOrder::default(),
            corruptions: Vec::new(),
            severity_table: SeverityTable::default(),
            corruption_seed: 0,
            grid: GridConfig::default(),
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), message: message.into() }
}

fn positive(key: &str, value: usize) -> Result<(), CliError> {
    if value == 0 {
        Err(invalid(key, "must be a positive integer"))
    } else {
        Ok(())
    }
}

fn non_negative(key: &str, value: f64) -> Result<(), CliError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be finite and >= 0, got {value}")))
    }
}

fn unit_interval(key: &str, value: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&value) {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in [0, 1), got {value}")))
    }
}

impl ExperimentConfig {
    /// Checks every constraint, naming the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "at least one method is required"));
        }
        if !self.clean && self.corruptions.is_empty() {
            return Err(invalid("clean", "nothing to evaluate: clean is false and no corruptions are listed"));
        }
        if self.stream.increments.is_empty() {
            return Err(invalid("stream.increments", "at least one task is required"));
        }
        for (i, &inc) in self.stream.increments.iter().enumerate() {
            positive(&format!("stream.increments[{i}]"), inc)?;
        }
        if self.stream.orderings.is_empty() {
            return Err(invalid("stream.orderings", "at least one ordering is required"));
        }
        if let DatasetConfig::Synth(s) = &self.dataset {
            positive("dataset.classes", s.classes)?;
            positive("dataset.train_per_class", s.train_per_class)?;
            positive("dataset.test_per_class", s.test_per_class)?;
            positive("dataset.image_size", s.image_size)?;
            let total: usize = self.stream.increments.iter().sum();
            if total > s.classes {
                return Err(invalid(
                    "stream.increments",
                    format!("increments cover {total} classes but the dataset has {}", s.classes),
                ));
            }
        }

        positive("phase1.epochs", self.phase1.epochs)?;
        positive("phase1.batch_size", self.phase1.batch_size)?;
        non_negative("phase1.base_lr", self.phase1.base_lr)?;
        unit_interval("phase1.momentum", self.phase1.momentum)?;
        non_negative("phase1.weight_decay", self.phase1.weight_decay)?;

        positive("tta.m", self.tta.m)?;
        positive("tta.n", self.tta.n)?;
        positive("tta.b", self.tta.b)?;
        non_negative("tta.lr", self.tta.lr)?;
        unit_interval("tta.momentum", self.tta.momentum)?;
        non_negative("tta.weight_decay", self.tta.weight_decay)?;
        if self.tta.param_mode == ParamMode::Head {
            return Err(invalid("tta.param_mode", "head cannot be adapted at test time"));
        }
        self.tta.augmentation.validate().map_err(|e| invalid("tta.augmentation", e.to_string()))?;

        for (axis, values) in [("n", &self.grid.n), ("b", &self.grid.b), ("m", &self.grid.m)] {
            for (i, &v) in values.iter().enumerate() {
                positive(&format!("grid.{axis}[{i}]"), v)?;
            }
        }
        if let Some(i) = self.grid.param_mode.iter().position(|&p| p == ParamMode::Head) {
            return Err(invalid(&format!("grid.param_mode[{i}]"), "head cannot be adapted at test time"));
        }

        self.severity_table.validate().map_err(|e| invalid("severity_table", e.to_string()))?;
        for (i, c) in self.corruptions.iter().enumerate() {
            if !(1..=5).contains(&c.severity) {
                return Err(invalid(&format!("corruptions[{i}].severity"), "must lie in 1..=5"));
            }
        }
        self.encoder.validate().map_err(|e| invalid("encoder", e.to_string()))?;
        Ok(())
    }

    /// Protocol configuration shared by every run, before grid and corruption.
    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            encoder: self.encoder.clone(),
            phase1: self.phase1.clone(),
            tta: self.tta.clone(),
            scoring: self.scoring,
            eval_order: self.eval_order,
            corruption: None,
        }
    }

    /// Evaluation conditions in run order: clean first, then each corruption.
    pub fn conditions(&self) -> Vec<Option<CorruptionSpec>> {
        let mut out = Vec::new();
        if self.clean {
            out.push(None);
        }
        out.extend(self.corruptions.iter().map(|c| {
            Some(CorruptionSpec {
                kind: c.kind,
                severity: c.severity,
                seed: self.corruption_seed,
                table: self.severity_table.clone(),
            })
        }));
        out
    }

    /// Grid points in run order; the `tta` section's values fill empty axes.
    pub fn variants(&self) -> Vec<Variant> {
        fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
            if values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let base = Variant::of(&self.tta);
        let mut out = Vec::new();
        for param_mode in axis(&self.grid.param_mode, base.param_mode) {
            for n in axis(&self.grid.n, base.n) {
                for b in axis(&self.grid.b, base.b) {
                    for m in axis(&self.grid.m, base.m) {
                        for reset in axis(&self.grid.reset, base.reset) {
                            let v = Variant { param_mode, n, b, m, reset };
                            if !out.contains(&v) {
                                out.push(v);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Parses a TOML experiment file, filling defaults and validating.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| invalid("", e.to_string().trim().to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let key = if key == "." { String::new() } else { key };
        invalid(&key, e.into_inner().to_string().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config { key: String::new(), message: format!("{}: {e}", path.display()) })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: CliError) -> String {
        match err {
            CliError::Config { key, .. } => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!((cfg.tta.m, cfg.tta.b, cfg.tta.n), (8, 16, 1));
        assert_eq!(cfg.tta.lr, 0.01);
        assert_eq!(cfg.tta.weight_decay, 0.0);
        assert_eq!(cfg.phase1.epochs, 20);
        assert_eq!(cfg.phase1.base_lr, 0.01);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn empty_sections_keep_defaults() {
        let cfg = parse_config_str("[tta]\n[phase1]\n").unwrap();
        assert_eq!(cfg.tta, TtaConfig::default());
        assert_eq!(cfg.phase1, Phase1Config::default());
    }

    #[test]
    fn zero_iterations_rejected_with_key() {
        assert_eq!(key_of(parse_config_str("[tta]\nn = 0\n").unwrap_err()), "tta.n");
        assert_eq!(key_of(parse_config_str("[grid]\nb = [16, 0]\n").unwrap_err()), "grid.b[1]");
    }

    #[test]
    fn unknown_and_mistyped_keys_name_their_path() {
        assert_eq!(key_of(parse_config_str("[tta]\nbogus = 1\n").unwrap_err()), "tta.bogus");
        assert_eq!(key_of(parse_config_str("[phase1]\nepochs = \"many\"\n").unwrap_err()), "phase1.epochs");
        assert_eq!(key_of(parse_config_str("methods = [\"magic\"]\n").unwrap_err()), "methods[0]");
        assert_eq!(key_of(parse_config_str("[stream]\nincrements = [20]\n").unwrap_err()), "stream.increments");
    }

    #[test]
    fn dataset_kinds() {
        let cfg = parse_config_str("[dataset]\nkind = \"synth\"\ntest_per_class = 4\n").unwrap();
        assert!(matches!(cfg.dataset, DatasetConfig::Synth(ref s) if s.test_per_class == 4));
        let text = "[dataset]\nkind = \"idx\"\ntrain_images = \"a\"\ntrain_labels = \"b\"\ntest_images = \"c\"\ntest_labels = \"d\"\n";
        assert!(matches!(parse_config_str(text).unwrap().dataset, DatasetConfig::Idx(_)));
        assert!(parse_config_str("[dataset]\nkind = \"synth\"\nnope = 1\n").is_err());
    }

    #[test]
    fn grid_expands_in_order_and_fills_from_base() {
        let cfg = parse_config_str("[grid]\nn = [1, 4]\nreset = [\"per-batch\", \"none\"]\n").unwrap();
        let v = cfg.variants();
        assert_eq!(v.len(), 4);
        assert_eq!((v[0].n, v[0].reset), (1, ResetPolicy::PerBatch));
        assert_eq!((v[1].n, v[1].reset), (1, ResetPolicy::None));
        assert_eq!((v[3].n, v[3].reset), (4, ResetPolicy::None));
        assert!(v.iter().all(|x| x.b == 16 && x.m == 8 && x.param_mode == ParamMode::Norm));
        assert_eq!(ExperimentConfig::default().variants(), vec![Variant::of(&TtaConfig::default())]);
    }

    #[test]
    fn conditions_put_clean_first() {
        let cfg = parse_config_str("[[corruptions]]\nkind = \"gaussian\"\nseverity = 3\n").unwrap();
        let c = cfg.conditions();
        assert_eq!(c.len(), 2);
        assert!(c[0].is_none());
        assert_eq!(c[1].as_ref().unwrap().severity, 3);
        assert_eq!(key_of(parse_config_str("[[corruptions]]\nkind = \"shot\"\nseverity = 9\n").unwrap_err()), "corruptions[0].severity");
    }
}
