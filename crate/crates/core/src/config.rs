//! Experiment configuration: a flat `section.key = value` text format.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 60
//! regime = self_distill
//! distill.alpha = 0.3      # keys may also be written fully qualified
//! ```
//!
//! A `[section]` header prefixes the keys that follow it. Lists are
//! comma-separated. Unknown keys are an error; every error in a file is
//! reported at once. Keys under `manifest.` are informational and ignored.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::autodiff::DType;
use crate::data::{Augment, CifarVariant, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::inference::EnsembleSpec;
use crate::loss::KlDirection;
use crate::model::{Arch, ModelConfig, SectionSpec};
use crate::probes::NoiseMode;
use crate::trainer::{Regime, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DataSource::Cifar10),
            "cifar100" => Ok(DataSource::Cifar100),
            "synthetic" => Ok(DataSource::Synthetic),
            other => Err(Error::invalid(format!("unknown data source `{other}`"))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Cifar10 => "cifar10",
            DataSource::Cifar100 => "cifar100",
            DataSource::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: PathBuf,
    /// Per-class caps (0 keeps every sample).
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub subset_seed: u64,
    pub synthetic_kind: SyntheticKind,
    pub n_samples: usize,
    pub num_classes: usize,
    pub noise: f64,
    pub shape: Vec<usize>,
    pub test_fraction: f64,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Cifar10,
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            train_per_class: 500,
            test_per_class: 100,
            subset_seed: 0,
            synthetic_kind: SyntheticKind::GaussianBlobs,
            n_samples: 600,
            num_classes: 3,
            noise: 1.0,
            shape: vec![8],
            test_fraction: 0.2,
            synthetic_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn num_classes(&self) -> usize {
        match self.source {
            DataSource::Cifar10 => 10,
            DataSource::Cifar100 => 100,
            DataSource::Synthetic => self.num_classes,
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self.source {
            DataSource::Synthetic => self.shape.clone(),
            _ => vec![3, 32, 32],
        }
    }

    pub fn cifar_variant(&self) -> Option<CifarVariant> {
        match self.source {
            DataSource::Cifar10 => Some(CifarVariant::Cifar10),
            DataSource::Cifar100 => Some(CifarVariant::Cifar100),
            DataSource::Synthetic => None,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            kind: self.synthetic_kind,
            n_samples: self.n_samples,
            num_classes: self.num_classes,
            noise: self.noise,
            seed: self.synthetic_seed,
            shape: self.shape.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub arch: Arch,
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub downsample: Vec<bool>,
    pub dtype: DType,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::MiniResnet,
            channels: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            downsample: vec![false, true, true, true],
            dtype: DType::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Explicit sigma grid; empty means the default grid from the weight spread.
    pub sigmas: Vec<f64>,
    pub steps: usize,
    pub trials: usize,
    pub mode: NoiseMode,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            sigmas: Vec::new(),
            steps: 10,
            trials: 5,
            mode: NoiseMode::Absolute,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalConfig {
    /// Per-exit weights; empty means uniform.
    pub ensemble_weights: Vec<f64>,
    /// Exits taking part; empty means all.
    pub ensemble_exits: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataConfig,
    pub train: TrainPlan,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse().map_err(|_| ())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_dtype(v: &str) -> std::result::Result<DType, ()> {
    match v {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(()),
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Every key the format accepts, in serialization order.
pub const KEYS: &[&str] = &[
    "model.arch",
    "model.channels",
    "model.blocks",
    "model.downsample",
    "model.dtype",
    "data.source",
    "data.dir",
    "data.train_per_class",
    "data.test_per_class",
    "data.subset_seed",
    "data.synthetic_kind",
    "data.n_samples",
    "data.num_classes",
    "data.noise",
    "data.shape",
    "data.test_fraction",
    "data.synthetic_seed",
    "train.regime",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.lr_milestones",
    "train.lr_decay",
    "train.momentum",
    "train.weight_decay",
    "train.seed",
    "train.augment",
    "train.checkpoint_every",
    "train.finetune_epochs",
    "train.grad_stats",
    "train.deterministic",
    "train.eval_batch_size",
    "distill.alpha",
    "distill.lambda",
    "distill.temperature",
    "distill.detach_teacher",
    "distill.t_squared_scaling",
    "distill.kl_direction",
    "probe.sigmas",
    "probe.steps",
    "probe.trials",
    "probe.mode",
    "probe.batch_size",
    "eval.ensemble_weights",
    "eval.ensemble_exits",
];

impl ExperimentConfig {
    /// Sets one dotted key; the error message names the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let bad = || format!("{key}: cannot parse `{v}`");
        macro_rules! p {
            ($e:expr) => {
                $e.map_err(|_| bad())?
            };
        }
        let (m, d, t) = (&mut self.model, &mut self.data, &mut self.train);
        match key {
            "model.arch" => m.arch = p!(v.parse()),
            "model.channels" => m.channels = p!(parse_list(v)),
            "model.blocks" => m.blocks = p!(parse_list(v)),
            "model.downsample" => m.downsample = p!(parse_list(v)),
            "model.dtype" => m.dtype = p!(parse_dtype(v)),
            "data.source" => d.source = p!(v.parse()),
            "data.dir" => d.dir = PathBuf::from(v),
            "data.train_per_class" => d.train_per_class = p!(v.parse()),
            "data.test_per_class" => d.test_per_class = p!(v.parse()),
            "data.subset_seed" => d.subset_seed = p!(v.parse()),
            "data.synthetic_kind" => d.synthetic_kind = p!(v.parse()),
            "data.n_samples" => d.n_samples = p!(v.parse()),
            "data.num_classes" => d.num_classes = p!(v.parse()),
            "data.noise" => d.noise = p!(v.parse()),
            "data.shape" => d.shape = p!(parse_list(v)),
            "data.test_fraction" => d.test_fraction = p!(v.parse()),
            "data.synthetic_seed" => d.synthetic_seed = p!(v.parse()),
            "train.regime" => t.regime = p!(v.parse::<Regime>()),
            "train.epochs" => t.epochs = p!(v.parse()),
            "train.batch_size" => t.batch_size = p!(v.parse()),
            "train.lr" => t.lr.initial = p!(v.parse()),
            "train.lr_milestones" => t.lr.milestones = p!(parse_list(v)),
            "train.lr_decay" => t.lr.factor = p!(v.parse()),
            "train.momentum" => t.momentum = p!(v.parse()),
            "train.weight_decay" => t.weight_decay = p!(v.parse()),
            "train.seed" => t.seed = p!(v.parse()),
            "train.augment" => t.augment = p!(v.parse::<Augment>()),
            "train.checkpoint_every" => t.checkpoint_every = p!(v.parse()),
            "train.finetune_epochs" => t.finetune_epochs = p!(v.parse()),
            "train.grad_stats" => t.record_grad_stats = p!(v.parse()),
            "train.deterministic" => t.deterministic = p!(v.parse()),
            "train.eval_batch_size" => t.eval_batch_size = p!(v.parse()),
            "distill.alpha" => t.distill.alpha = p!(v.parse()),
            "distill.lambda" => t.distill.lambda = p!(v.parse()),
            "distill.temperature" => t.distill.temperature = p!(v.parse()),
            "distill.detach_teacher" => t.distill.detach_teacher = p!(v.parse()),
            "distill.t_squared_scaling" => t.distill.t_squared_scaling = p!(v.parse()),
            "distill.kl_direction" => t.distill.kl_direction = p!(v.parse::<KlDirection>()),
            "probe.sigmas" => self.probe.sigmas = p!(parse_list(v)),
            "probe.steps" => self.probe.steps = p!(v.parse()),
            "probe.trials" => self.probe.trials = p!(v.parse()),
            "probe.mode" => self.probe.mode = p!(v.parse::<NoiseMode>()),
            "probe.batch_size" => self.probe.batch_size = p!(v.parse()),
            "eval.ensemble_weights" => self.eval.ensemble_weights = p!(parse_list(v)),
            "eval.ensemble_exits" => self.eval.ensemble_exits = p!(parse_list(v)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Current value of a dotted key in its serialized form.
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, d, t) = (&self.model, &self.data, &self.train);
        Some(match key {
            "model.arch" => m.arch.to_string(),
            "model.channels" => join(&m.channels),
            "model.blocks" => join(&m.blocks),
            "model.downsample" => join(&m.downsample),
            "model.dtype" => dtype_name(m.dtype).to_string(),
            "data.source" => d.source.to_string(),
            "data.dir" => d.dir.display().to_string(),
            "data.train_per_class" => d.train_per_class.to_string(),
            "data.test_per_class" => d.test_per_class.to_string(),
            "data.subset_seed" => d.subset_seed.to_string(),
            "data.synthetic_kind" => d.synthetic_kind.to_string(),
            "data.n_samples" => d.n_samples.to_string(),
            "data.num_classes" => d.num_classes.to_string(),
            "data.noise" => d.noise.to_string(),
            "data.shape" => join(&d.shape),
            "data.test_fraction" => d.test_fraction.to_string(),
            "data.synthetic_seed" => d.synthetic_seed.to_string(),
            "train.regime" => t.regime.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.initial.to_string(),
            "train.lr_milestones" => join(&t.lr.milestones),
            "train.lr_decay" => t.lr.factor.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.augment" => t.augment.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.finetune_epochs" => t.finetune_epochs.to_string(),
            "train.grad_stats" => t.record_grad_stats.to_string(),
            "train.deterministic" => t.deterministic.to_string(),
            "train.eval_batch_size" => t.eval_batch_size.to_string(),
            "distill.alpha" => t.distill.alpha.to_string(),
            "distill.lambda" => t.distill.lambda.to_string(),
            "distill.temperature" => t.distill.temperature.to_string(),
            "distill.detach_teacher" => t.distill.detach_teacher.to_string(),
            "distill.t_squared_scaling" => t.distill.t_squared_scaling.to_string(),
            "distill.kl_direction" => t.distill.kl_direction.to_string(),
            "probe.sigmas" => join(&self.probe.sigmas),
            "probe.steps" => self.probe.steps.to_string(),
            "probe.trials" => self.probe.trials.to_string(),
            "probe.mode" => self.probe.mode.to_string(),
            "probe.batch_size" => self.probe.batch_size.to_string(),
            "eval.ensemble_weights" => join(&self.eval.ensemble_weights),
            "eval.ensemble_exits" => join(&self.eval.ensemble_exits),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults, without checking invariants.
    pub fn parse_unchecked(text: &str) -> std::result::Result<Self, Vec<String>> {
        let (cfg, errs) = Self::parse_lenient(text);
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }

    /// Applies every well-formed line and returns the problems with the rest.
    pub fn parse_lenient(text: &str) -> (Self, Vec<String>) {
        let mut cfg = Self::default();
        let mut errs = Vec::new();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {}: expected `key = value`", no + 1));
                continue;
            };
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if key.starts_with("manifest.") {
                continue;
            }
            if let Err(e) = cfg.set(&key, v) {
                errs.push(e);
            }
        }
        (cfg, errs)
    }

    /// Parses and validates; all problems are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        Self::resolve(text, &[])
    }

    /// Parses, applies `key=value` overrides, validates; every problem is reported together.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let (mut cfg, mut errs) = Self::parse_lenient(text);
        errs.extend(cfg.override_errors(overrides));
        errs.extend(cfg.violations());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let errs = self.override_errors(overrides);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn override_errors(&mut self, overrides: &[String]) -> Vec<String> {
        let mut errs = Vec::new();
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errs.push(e);
                    }
                }
                None => errs.push(format!("override `{o}` is not key=value")),
            }
        }
        errs
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.train.violations();
        let m = &self.model;
        if m.channels.len() < 2 {
            errs.push("model.channels must list at least 2 sections".into());
        }
        if m.blocks.len() != m.channels.len() || m.downsample.len() != m.channels.len() {
            errs.push("model.blocks and model.downsample must have one entry per model.channels entry".into());
        }
        if m.channels.contains(&0) || m.blocks.contains(&0) {
            errs.push("model.channels and model.blocks entries must be >= 1".into());
        }
        let d = &self.data;
        if d.source == DataSource::Synthetic {
            if d.num_classes < 2 {
                errs.push("data.num_classes must be >= 2".into());
            }
            if d.n_samples < d.num_classes {
                errs.push("data.n_samples must be >= data.num_classes".into());
            }
            if !(d.noise >= 0.0 && d.noise.is_finite()) {
                errs.push("data.noise must be >= 0".into());
            }
            if d.shape.is_empty() || d.shape.contains(&0) {
                errs.push("data.shape must be non-empty with positive entries".into());
            }
            if !(0.0..1.0).contains(&d.test_fraction) {
                errs.push("data.test_fraction must be in [0,1)".into());
            }
        }
        if m.arch.is_spatial() && self.data.sample_shape().len() != 3 {
            errs.push(format!("model.arch {} needs image-shaped data (C,H,W)", m.arch));
        }
        if !m.arch.is_spatial() && self.data.sample_shape().len() != 1 {
            errs.push("model.arch mlp needs vector-shaped data".into());
        }
        if self.probe.trials < 1 {
            errs.push("probe.trials must be >= 1".into());
        }
        if self.probe.sigmas.first().is_some_and(|&s| s != 0.0)
            || self.probe.sigmas.windows(2).any(|w| w[1] < w[0])
        {
            errs.push("probe.sigmas must ascend from 0".into());
        }
        if !self.eval.ensemble_weights.is_empty() {
            if let Err(e) = self.ensemble_spec(m.channels.len()) {
                errs.push(format!("eval.ensemble_weights: {e}"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Serializes every key, grouped by section.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(s, "{name} = {}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            arch: m.arch,
            sections: m
                .channels
                .iter()
                .zip(&m.blocks)
                .zip(&m.downsample)
                .map(|((&c, &b), &ds)| SectionSpec::new(b, c, ds))
                .collect(),
            num_classes: self.data.num_classes(),
            input_shape: self.data.sample_shape(),
        }
    }

    /// Ensemble weights for a model with `exits` exits.
    pub fn ensemble_spec(&self, exits: usize) -> Result<EnsembleSpec> {
        let weights = if self.eval.ensemble_weights.is_empty() {
            vec![1.0; exits]
        } else if self.eval.ensemble_weights.len() != exits {
            return Err(Error::invalid(format!(
                "expected {exits} ensemble weights, got {}",
                self.eval.ensemble_weights.len()
            )));
        } else {
            self.eval.ensemble_weights.clone()
        };
        let included = if self.eval.ensemble_exits.is_empty() {
            (1..=exits).collect()
        } else {
            self.eval.ensemble_exits.clone()
        };
        EnsembleSpec::new(weights, included)
    }
}

/// Reproducibility record written into every run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    pub dataset_checksum: String,
    pub started: u64,
    pub finished: Option<u64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, dataset_checksum: String) -> Self {
        Self {
            seed: config.train.seed,
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_checksum,
            started: unix_now(),
            finished: None,
        }
    }

    /// Config text preceded by a `[manifest]` block; loadable as a config file.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[manifest]\n");
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "dataset_checksum = {}", self.dataset_checksum);
        let _ = writeln!(s, "started = {}", self.started);
        let finished = self.finished.map_or_else(String::new, |f| f.to_string());
        let _ = writeln!(s, "finished = {finished}\n");
        s.push_str(&self.config.to_text());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config = ExperimentConfig::parse(text)?;
        let mut fields = std::collections::HashMap::new();
        let mut in_manifest = false;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                in_manifest = name.trim() == "manifest";
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let k = k.trim();
                let k = if in_manifest { k } else { k.strip_prefix("manifest.").unwrap_or("") };
                if !k.is_empty() {
                    fields.insert(k.to_string(), v.trim().to_string());
                }
            }
        }
        let field = |k: &str| fields.get(k).cloned().unwrap_or_default();
        Ok(Self {
            seed: field("seed").parse().unwrap_or(config.train.seed),
            config,
            version: field("version"),
            dataset_checksum: field("dataset_checksum"),
            started: field("started").parse().unwrap_or(0),
            finished: field("finished").parse().ok(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_config_is_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap().train, TrainPlan::default());
    }

    #[test]
    fn sections_and_qualified_keys() {
        let cfg = ExperimentConfig::parse("[train]\nepochs = 3\ndistill.alpha = 0.5\n[distill]\nlambda=0.2").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.distill.alpha, 0.5);
        assert_eq!(cfg.train.distill.lambda, 0.2);
    }

    #[test]
    fn errors_are_aggregated_and_named() {
        let err = ExperimentConfig::parse("[distill]\nalpha = 1.5\ntemperature = 0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("distill.alpha must be in [0,1]"), "{msg}");
        assert!(msg.contains("distill.temperature"), "{msg}");
        let err = ExperimentConfig::parse("bogus.key = 1\ntrain.epochs = x\n").unwrap_err();
        match err {
            Error::Config(errs) => {
                assert_eq!(errs.len(), 2);
                assert!(errs[0].contains("bogus.key"));
                assert!(errs[1].contains("train.epochs"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::parse("distill.alpha = 0.1").unwrap();
        cfg.apply_overrides(&["distill.alpha=0.3".into()]).unwrap();
        assert_eq!(cfg.train.distill.alpha, 0.3);
        assert!(cfg.apply_overrides(&["nope=1".into()]).is_err());
    }

    #[test]
    fn every_key_round_trips() {
        let cfg = ExperimentConfig::default();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            let mut other = ExperimentConfig::default();
            other.set(key, &v).unwrap();
            assert_eq!(other, cfg, "{key}");
        }
    }

    #[test]
    fn manifest_is_a_loadable_config() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epochs = 7;
        let mut m = RunManifest::new(cfg.clone(), "abc".into());
        m.finished = Some(m.started + 5);
        let back = RunManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(ExperimentConfig::parse(&m.to_text()).unwrap(), cfg);
    }

    proptest! {
        #[test]
        fn config_round_trip(
            alpha in 0.0f64..=1.0,
            lambda in 0.0f64..10.0,
            temperature in 0.01f64..20.0,
            epochs in 1usize..500,
            lr in 0.0f64..1.0,
            seed in any::<u64>(),
            detach in any::<bool>(),
            sigmas in prop::collection::vec(0.0f64..1.0, 0..5),
        ) {
            let mut cfg = ExperimentConfig::default();
            cfg.train.distill.alpha = alpha;
            cfg.train.distill.lambda = lambda;
            cfg.train.distill.temperature = temperature;
            cfg.train.distill.detach_teacher = detach;
            cfg.train.epochs = epochs;
            cfg.train.lr.initial = lr;
            cfg.train.seed = seed;
            let mut s = sigmas;
            s.sort_by(f64::total_cmp);
            if !s.is_empty() { s[0] = 0.0; }
            cfg.probe.sigmas = s;
            let text = cfg.to_text();
            let back = ExperimentConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
