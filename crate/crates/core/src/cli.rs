//! Command-line harness.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::{DType, Scalar};
use crate::checkpoint;
use crate::config::{DataSource, ExperimentConfig, RunManifest};
use crate::data::{batches, load_cifar, make_synthetic, split_stratified, Splits, Subset};
use crate::error::{Error, Result};
use crate::inference::count_macs;
use crate::model::MultiExitModel;
use crate::probes::{self, NoiseProbeConfig};
use crate::trainer::{self, EvalOptions, RunOutput};

pub const MANIFEST_FILE: &str = "manifest.cfg";

#[derive(Debug, Parser)]
#[command(name = "sdnet", version, about = "Self-distillation training for multi-exit networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Config file; defaults to the run's manifest, or built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.alpha=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelSource {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint file; defaults to the run's final checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model into a new run directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy of one exit, an ensemble, or all exits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        exit: Option<usize>,
        /// Comma-separated per-exit ensemble weights.
        #[arg(long)]
        ensemble: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Per-exit MACs, parameters and acceleration ratios.
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// Weight-noise robustness on the train split.
    ProbeNoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
    },
    /// Per-layer mean |gradient| on the first training batch.
    GradStats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
    },
    /// Per-exit SSE/SSB of pooled features.
    Separability {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Principal-component projections of one exit's features.
    PcaExport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        exit: Option<usize>,
        #[arg(long, default_value_t = 2)]
        components: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(Error),
    Runtime(Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn cfg_err(e: Error) -> CliError {
    CliError::Config(e)
}

fn rt(e: Error) -> CliError {
    CliError::Runtime(e)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| cfg_err(Error::io(path, e)))
}

/// Resolves the config: explicit file, else the run's manifest, else defaults; then overrides.
pub fn resolve_config(common: &Common, run: Option<&Path>) -> CliResult<ExperimentConfig> {
    let text = match (&common.config, run) {
        (Some(p), _) => read_text(p)?,
        (None, Some(r)) => read_text(&r.join(MANIFEST_FILE))?,
        (None, None) => String::new(),
    };
    ExperimentConfig::resolve(&text, &common.set).map_err(cfg_err)
}

/// Loads and standardizes the configured dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let ds = make_synthetic(&d.synthetic_spec())?;
            let mut splits = split_stratified(&ds, d.test_fraction, d.synthetic_seed)?;
            splits.standardize();
            Ok(splits)
        }
        DataSource::Cifar10 | DataSource::Cifar100 => {
            let cap = |c: usize| (c > 0).then_some(c);
            let subset = Subset {
                train_per_class: cap(d.train_per_class),
                test_per_class: cap(d.test_per_class),
                seed: d.subset_seed,
            };
            load_cifar(&d.dir, d.cifar_variant().expect("cifar source"), Some(subset))
        }
    }
}

fn write_output(out: Option<&Path>, name: &str, content: &str) -> CliResult<()> {
    print!("{content}");
    let Some(dir) = out else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| rt(Error::io(dir, e)))?;
    let path = dir.join(name);
    if path.exists() {
        return Err(cfg_err(Error::invalid(format!("refusing to overwrite {}", path.display()))));
    }
    std::fs::write(&path, content).map_err(|e| rt(Error::io(&path, e)))
}

fn load_model<T: Scalar>(cfg: &ExperimentConfig, source: &ModelSource) -> CliResult<MultiExitModel<T>> {
    let mut model = MultiExitModel::<T>::build(&cfg.model_config(), cfg.train.seed).map_err(cfg_err)?;
    let ck = match (&source.checkpoint, &source.run) {
        (Some(c), _) => Some(c.clone()),
        (None, Some(r)) => Some(RunOutput { dir: r.clone() }.final_checkpoint()),
        (None, None) => None,
    };
    if let Some(ck) = ck {
        checkpoint::load_model(&mut model, &ck).map_err(rt)?;
    }
    Ok(model)
}

fn require_model_source(source: &ModelSource) -> CliResult<()> {
    if source.run.is_none() && source.checkpoint.is_none() {
        return Err(cfg_err(Error::invalid("pass --run or --checkpoint")));
    }
    Ok(())
}

fn execute(cmd: &Command) -> CliResult<()> {
    let dtype = |common: &Common, run: Option<&Path>| resolve_config(common, run).map(|c| (c.model.dtype, c));
    macro_rules! dispatch {
        ($dtype:expr, $f:ident($($arg:expr),*)) => {
            match $dtype {
                DType::F32 => $f::<f32>($($arg),*),
                DType::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match cmd {
        Command::Train { common } => {
            let (dt, cfg) = dtype(common, None)?;
            dispatch!(dt, cmd_train(&cfg, common))
        }
        Command::Eval {
            common,
            source,
            exit,
            ensemble,
            split,
        } => {
            require_model_source(source)?;
            let (dt, mut cfg) = dtype(common, source.run.as_deref())?;
            if let Some(w) = ensemble {
                cfg.set("eval.ensemble_weights", w)
                    .map_err(|e| cfg_err(Error::Config(vec![e])))?;
            }
            dispatch!(dt, cmd_eval(&cfg, common, source, *exit, ensemble.is_some(), *split))
        }
        Command::Flops { common } => {
            let (dt, cfg) = dtype(common, None)?;
            dispatch!(dt, cmd_flops(&cfg, common))
        }
        Command::ProbeNoise { common, source } => {
            require_model_source(source)?;
            let (dt, cfg) = dtype(common, source.run.as_deref())?;
            dispatch!(dt, cmd_probe_noise(&cfg, common, source))
        }
        Command::GradStats { common, source } => {
            let (dt, cfg) = dtype(common, source.run.as_deref())?;
            dispatch!(dt, cmd_grad_stats(&cfg, common, source))
        }
        Command::Separability { common, source, split } => {
            require_model_source(source)?;
            let (dt, cfg) = dtype(common, source.run.as_deref())?;
            dispatch!(dt, cmd_separability(&cfg, common, source, *split))
        }
        Command::PcaExport {
            common,
            source,
            exit,
            components,
            split,
        } => {
            require_model_source(source)?;
            let (dt, cfg) = dtype(common, source.run.as_deref())?;
            dispatch!(dt, cmd_pca(&cfg, common, source, *exit, *components, *split))
        }
    }
}

/// Trains from a resolved config into a fresh run directory.
pub fn train_run<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<trainer::TrainRecord>> {
    if out.exists() {
        return Err(cfg_err(Error::invalid(format!(
            "run directory {} already exists",
            out.display()
        ))));
    }
    let mut model = MultiExitModel::<T>::build(&cfg.model_config(), cfg.train.seed).map_err(cfg_err)?;
    let splits = load_data(cfg).map_err(rt)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| rt(Error::io(parent, e)))?;
    }
    std::fs::create_dir(out).map_err(|e| rt(Error::io(out, e)))?;
    let mut manifest = RunManifest::new(cfg.clone(), splits.checksum());
    let manifest_path = out.join(MANIFEST_FILE);
    let write_manifest = |m: &RunManifest| std::fs::write(&manifest_path, m.to_text()).map_err(|e| rt(Error::io(&manifest_path, e)));
    write_manifest(&manifest)?;
    let run = RunOutput { dir: out.to_path_buf() };
    let records = trainer::train(&mut model, &splits, &cfg.train, Some(&run)).map_err(rt)?;
    manifest.finished = Some(crate::config::unix_now());
    write_manifest(&manifest)?;
    Ok(records)
}

fn cmd_train<T: Scalar>(cfg: &ExperimentConfig, common: &Common) -> CliResult<()> {
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| cfg_err(Error::invalid("train needs --out <dir>")))?;
    let records = train_run::<T>(cfg, out)?;
    if let Some(last) = records.last() {
        for e in &last.exits {
            println!("exit {}: test accuracy {:.2}", e.exit, e.test_accuracy);
        }
        println!("ensemble: test accuracy {:.2}", last.ensemble_test_accuracy);
    }
    Ok(())
}

fn pick(splits: Splits, split: SplitName) -> crate::data::Dataset {
    match split {
        SplitName::Train => splits.train,
        SplitName::Test => splits.test,
    }
}

fn split_name(split: SplitName) -> &'static str {
    match split {
        SplitName::Train => "train",
        SplitName::Test => "test",
    }
}

fn cmd_eval<T: Scalar>(
    cfg: &ExperimentConfig,
    common: &Common,
    source: &ModelSource,
    exit: Option<usize>,
    ensemble: bool,
    split: SplitName,
) -> CliResult<()> {
    let model = load_model::<T>(cfg, source)?;
    let data = pick(load_data(cfg).map_err(rt)?, split);
    let name = split_name(split);
    let mut csv = String::from("exit,split,accuracy\n");
    if let Some(exit) = exit {
        if !model.exit_indices().contains(&exit) {
            return Err(cfg_err(Error::invalid(format!(
                "--exit {exit} out of range 1..={}",
                model.deepest_index()
            ))));
        }
        let (acc, _) = probes::exit_accuracy_and_loss(&model, &data, exit, cfg.train.eval_batch_size).map_err(rt)?;
        csv.push_str(&format!("{exit},{name},{acc}\n"));
    } else {
        let spec = cfg.ensemble_spec(model.deepest_index()).map_err(cfg_err)?;
        let opts = EvalOptions {
            batch_size: cfg.train.eval_batch_size,
            ensemble: Some(spec),
            distill: cfg.train.effective_distill(),
        };
        let report = trainer::evaluate(&model, &data, &opts).map_err(rt)?;
        if !ensemble {
            for (e, a) in report.exits.iter().zip(&report.accuracy) {
                csv.push_str(&format!("{e},{name},{a}\n"));
            }
        }
        csv.push_str(&format!("ensemble,{name},{}\n", report.ensemble_accuracy));
    }
    write_output(common.out.as_deref(), "eval.csv", &csv)
}

fn cmd_flops<T: Scalar>(cfg: &ExperimentConfig, common: &Common) -> CliResult<()> {
    let model = MultiExitModel::<T>::build(&cfg.model_config(), cfg.train.seed).map_err(cfg_err)?;
    write_output(common.out.as_deref(), "flops.csv", &count_macs(&model).to_csv())
}

fn cmd_probe_noise<T: Scalar>(cfg: &ExperimentConfig, common: &Common, source: &ModelSource) -> CliResult<()> {
    let model = load_model::<T>(cfg, source)?;
    let splits = load_data(cfg).map_err(rt)?;
    let sigmas = if cfg.probe.sigmas.is_empty() {
        probes::default_sigma_grid(&model, cfg.probe.steps)
    } else {
        cfg.probe.sigmas.clone()
    };
    let probe_cfg = NoiseProbeConfig {
        sigmas,
        trials: cfg.probe.trials,
        seed: cfg.train.seed,
        mode: cfg.probe.mode,
        exit: None,
        batch_size: cfg.probe.batch_size,
    };
    let result = probes::noise_probe(&model, &splits.train, &probe_cfg).map_err(rt)?;
    write_output(common.out.as_deref(), "noise_probe.csv", &result.to_csv())
}

fn cmd_grad_stats<T: Scalar>(cfg: &ExperimentConfig, common: &Common, source: &ModelSource) -> CliResult<()> {
    let model = load_model::<T>(cfg, source)?;
    let splits = load_data(cfg).map_err(rt)?;
    let plan = &cfg.train;
    let batch = batches::<T>(&splits.train, plan.batch_size, Some(plan.seed), plan.augment, 1)
        .next()
        .ok_or_else(|| rt(Error::invalid("train split is empty")))?;
    let stats = probes::grad_stats(&model, &batch.inputs, &batch.labels, plan).map_err(rt)?;
    write_output(common.out.as_deref(), "grad_stats.csv", &stats.to_csv())
}

fn cmd_separability<T: Scalar>(
    cfg: &ExperimentConfig,
    common: &Common,
    source: &ModelSource,
    split: SplitName,
) -> CliResult<()> {
    let model = load_model::<T>(cfg, source)?;
    let data = pick(load_data(cfg).map_err(rt)?, split);
    let report = probes::separability(&model, &data, cfg.train.eval_batch_size).map_err(rt)?;
    for c in &report.skipped_classes {
        eprintln!("warning: class {c} has no samples; skipped");
    }
    write_output(common.out.as_deref(), "separability.csv", &report.to_csv())
}

fn cmd_pca<T: Scalar>(
    cfg: &ExperimentConfig,
    common: &Common,
    source: &ModelSource,
    exit: Option<usize>,
    components: usize,
    split: SplitName,
) -> CliResult<()> {
    let model = load_model::<T>(cfg, source)?;
    let exit = exit.unwrap_or_else(|| model.deepest_index());
    let data = pick(load_data(cfg).map_err(rt)?, split);
    let export = probes::export_features_pca(&model, &data, exit, components, cfg.train.eval_batch_size).map_err(rt)?;
    write_output(common.out.as_deref(), &format!("pca_exit{exit}.csv"), &export.to_csv())
}
