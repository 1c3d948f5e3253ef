//! Command-line front end: `train`, `eval`, `diagnose` and `export-logits`.
//!
//! Every setting can come from a JSON file (`--config`) whose keys mirror
//! the long flags with underscores; flags win over the file. `train` writes
//! the fully resolved settings to `<out>/config.json` before doing anything
//! else, and that file reproduces the run when passed back as `--config`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{load_cifar100, synth_splits, AugmentConfig, ChannelStats, Dataset};
use crate::error::Error;
use crate::msd::default_tau;
use crate::network::{ArchConfig, Checkpoint, MultiExitNetwork};
use crate::runtime::{
    accuracy_table, agreement_matrix, agreement_table, budget_curve, budget_table, evaluate_policy, export_logits,
    exclusive_correct_counts, ConfidenceMeasure, EvalReport, ExclusivityReport, ExitPolicy, LogitTable,
};
use crate::trainer::{derive_seed, fit, AugmentSettings, RunDirObserver, TrainConfig, TrainMode, INIT};

/// Process exit codes.
pub mod exit_code {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;
}

/// Thresholds swept by `eval` for the budget curve.
pub const BUDGET_THRESHOLDS: [f64; 8] = [0.0, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99, 1.01];

#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct CliError {
    pub code: u8,
    #[source]
    pub source: Error,
}

impl CliError {
    fn config(source: Error) -> Self {
        CliError { code: exit_code::CONFIG, source }
    }

    fn data(source: Error) -> Self {
        CliError { code: exit_code::DATA, source }
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Self::config(Error::Validation(msg.into()))
    }
}

impl From<Error> for CliError {
    fn from(source: Error) -> Self {
        let code = match source {
            Error::NonFinite { .. } => exit_code::NUMERIC,
            Error::Validation(_) | Error::Domain(_) | Error::InvalidValue(_) => exit_code::CONFIG,
            Error::Data { .. } => exit_code::DATA,
            _ => exit_code::OTHER,
        };
        CliError { code, source }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "multiexit", version, about = "Train and evaluate multi-exit networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write a run directory.
    Train(RunArgs),
    /// Per-classifier accuracy, an exit policy and the budget curve.
    Eval(EvalArgs),
    /// Exclusivity, classifier agreement and per-exit cost shares.
    Diagnose(EvalArgs),
    /// Write every classifier's test logits as tensor files.
    ExportLogits(EvalArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture JSON.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// `cifar100:DIR`, `synthetic` or `synthetic:M,PER_CLASS,SIZE`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta_begin: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 keeps every result reproducible.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Confidence,
    Fixed,
    Ensemble,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to load; defaults to `<out>/checkpoints/last.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// 1-based classifier for `--policy fixed`.
    #[arg(long)]
    pub exit: Option<usize>,
    #[arg(long, value_enum)]
    pub confidence: Option<Confidence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Confidence {
    MaxProb,
    Entropy,
}

impl From<Confidence> for ConfidenceMeasure {
    fn from(c: Confidence) -> Self {
        match c {
            Confidence::MaxProb => ConfidenceMeasure::MaxProb,
            Confidence::Entropy => ConfidenceMeasure::Entropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSource {
    Path(PathBuf),
    Inline(ArchConfig),
}

/// The settings file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<TrainMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_begin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_milestones: Option<Vec<(usize, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hflip_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<ConfidenceMeasure>,
}

impl SettingsFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(Error::io(path, e)))?;
        let mut file: SettingsFile = serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        if let Some(ArchSource::Path(p)) = &file.arch {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                file.arch = Some(ArchSource::Path(base.join(p)));
            }
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSpec {
    Cifar100(PathBuf),
    /// Classes, samples per class, image side; `None` takes the class
    /// count from the architecture, 100 per class and 16 pixels.
    Synthetic(Option<(usize, usize, usize)>),
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Validation(format!("data must be cifar100:DIR or synthetic[:M,PER_CLASS,SIZE], got {s:?}"));
        if let Some(dir) = s.strip_prefix("cifar100:") {
            if dir.is_empty() {
                return Err(bad());
            }
            return Ok(DataSpec::Cifar100(dir.into()));
        }
        if s == "synthetic" {
            return Ok(DataSpec::Synthetic(None));
        }
        let rest = s.strip_prefix("synthetic:").ok_or_else(bad)?;
        let parts: Vec<usize> = rest.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
        match parts[..] {
            [m, per, size] if m >= 2 && size > 0 => Ok(DataSpec::Synthetic(Some((m, per, size)))),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Cifar100(dir) => write!(f, "cifar100:{}", dir.display()),
            DataSpec::Synthetic(None) => write!(f, "synthetic"),
            DataSpec::Synthetic(Some((m, p, s))) => write!(f, "synthetic:{m},{p},{s}"),
        }
    }
}

impl DataSpec {
    fn num_classes(&self) -> Option<usize> {
        match self {
            DataSpec::Cifar100(_) => Some(100),
            DataSpec::Synthetic(s) => s.map(|(m, _, _)| m),
        }
    }

    /// Train and test splits. Synthetic data is drawn from `seed`.
    pub fn load(&self, seed: u64) -> crate::Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Cifar100(dir) => load_cifar100(dir),
            DataSpec::Synthetic(Some((m, per, size))) => synth_splits(*m, *per, *size, seed),
            DataSpec::Synthetic(None) => Err(Error::Validation("synthetic data spec was not resolved".into())),
        }
    }
}

/// Fully resolved settings of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub arch: ArchConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub threads: usize,
}

impl RunSpec {
    /// The settings file that reproduces this run.
    pub fn to_settings(&self) -> SettingsFile {
        let t = &self.train;
        SettingsFile {
            arch: Some(ArchSource::Inline(self.arch.resolved())),
            data: Some(self.data.to_string()),
            out: Some(self.out.clone()),
            threads: Some(self.threads),
            mode: Some(t.mode),
            alpha: Some(t.loss.alpha),
            beta_begin: Some(t.loss.beta_begin),
            beta_end: Some(t.loss.beta_end),
            tau: Some(t.loss.tau),
            epochs: Some(t.epochs),
            batch_size: Some(t.batch_size),
            lr: Some(t.lr),
            seed: Some(t.seed),
            lr_milestones: Some(t.lr_milestones.clone()),
            momentum: Some(t.momentum),
            weight_decay: Some(t.weight_decay),
            crop_pad: Some(t.augment.crop_pad),
            hflip_prob: Some(t.augment.hflip_prob),
            ..SettingsFile::default()
        }
    }
}

const DEFAULT_EPOCHS: usize = 200;
const DEFAULT_OUT: &str = "runs/latest";

fn read_arch(source: &ArchSource) -> CliResult<ArchConfig> {
    match source {
        ArchSource::Inline(a) => {
            a.validate().map_err(CliError::config)?;
            Ok(a.clone())
        }
        ArchSource::Path(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(Error::io(p, e)))?;
            ArchConfig::from_json(&text).map_err(|e| CliError::invalid(format!("arch {}: {e}", p.display())))
        }
    }
}

/// Merges flags over the settings file over the defaults.
pub fn resolve(args: &RunArgs, file: &SettingsFile) -> CliResult<RunSpec> {
    let arch_source = args
        .arch
        .clone()
        .map(ArchSource::Path)
        .or_else(|| file.arch.clone())
        .ok_or_else(|| CliError::invalid("arch: no architecture given (--arch PATH)"))?;
    let arch = read_arch(&arch_source)?;
    let data_text = args.data.clone().or_else(|| file.data.clone()).unwrap_or_else(|| "synthetic".into());
    let mut data: DataSpec = data_text.parse().map_err(CliError::config)?;
    if data == DataSpec::Synthetic(None) {
        data = DataSpec::Synthetic(Some((arch.num_classes, 100, 16)));
    }
    let classes = data.num_classes().expect("resolved data");
    if classes != arch.num_classes {
        return Err(CliError::invalid(format!(
            "arch: num_classes is {} but the data has {classes} classes",
            arch.num_classes
        )));
    }
    let synthetic = matches!(data, DataSpec::Synthetic(_));

    let epochs = args.epochs.or(file.epochs).unwrap_or(DEFAULT_EPOCHS);
    let mut t = TrainConfig::new(classes, epochs);
    t.mode = match &args.mode {
        Some(m) => m.parse().map_err(CliError::config)?,
        None => file.mode.unwrap_or_default(),
    };
    t.loss.alpha = args.alpha.or(file.alpha).unwrap_or(t.loss.alpha);
    t.loss.beta_begin = args.beta_begin.or(file.beta_begin).unwrap_or(t.loss.beta_begin);
    t.loss.beta_end = args.beta_end.or(file.beta_end).unwrap_or(t.loss.beta_end);
    t.loss.tau = args.tau.or(file.tau).unwrap_or(default_tau(classes));
    t.batch_size = args.batch_size.or(file.batch_size).unwrap_or(t.batch_size);
    t.lr = args.lr.or(file.lr).unwrap_or(t.lr);
    t.seed = args.seed.or(file.seed).unwrap_or(0);
    t.lr_milestones = file.lr_milestones.clone().unwrap_or(t.lr_milestones);
    t.momentum = file.momentum.unwrap_or(t.momentum);
    t.weight_decay = file.weight_decay.unwrap_or(t.weight_decay);
    let aug = if synthetic { AugmentSettings { crop_pad: 2, hflip_prob: 0.0 } } else { AugmentSettings::default() };
    t.augment = AugmentSettings {
        crop_pad: file.crop_pad.unwrap_or(aug.crop_pad),
        hflip_prob: file.hflip_prob.unwrap_or(aug.hflip_prob),
    };
    t.validate().map_err(CliError::config)?;

    let threads = args.threads.or(file.threads).unwrap_or(1);
    if threads == 0 {
        return Err(CliError::invalid("threads must be at least 1"));
    }
    let out = args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
    Ok(RunSpec { arch, data, train: t, out, threads })
}

fn settings_for(args: &RunArgs, fallback_dir: bool) -> CliResult<SettingsFile> {
    if let Some(path) = &args.config {
        return SettingsFile::load(path);
    }
    if fallback_dir {
        if let Some(out) = &args.out {
            let path = out.join("config.json");
            if path.exists() {
                return SettingsFile::load(&path);
            }
        }
    }
    Ok(SettingsFile::default())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

fn load_data(spec: &RunSpec) -> CliResult<(Dataset, Dataset)> {
    let (train, test) = spec.data.load(spec.train.seed).map_err(CliError::data)?;
    let [c, _, _] = train.dims();
    if c != spec.arch.in_channels {
        return Err(CliError::invalid(format!(
            "arch: in_channels is {} but the images have {c} channels",
            spec.arch.in_channels
        )));
    }
    Ok((train, test))
}

fn with_threads<R: Send>(threads: usize, job: impl FnOnce() -> CliResult<R> + Send) -> CliResult<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::invalid(format!("threads: {e}")))?;
    pool.install(job)
}

/// Runs `train`; returns the resolved spec.
pub fn cmd_train(args: &RunArgs) -> CliResult<RunSpec> {
    let file = settings_for(args, false)?;
    let spec = resolve(args, &file)?;
    fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    write_json(&spec.out.join("config.json"), &spec.to_settings())?;
    with_threads(spec.threads, || {
        let (train, test) = load_data(&spec)?;
        let mut net = MultiExitNetwork::<f32>::from_arch(&spec.arch, derive_seed(spec.train.seed, INIT, 0))?;
        let mut observer = RunDirObserver::new(&spec.out, false)?;
        let report = fit(&mut net, &train, &test, &spec.train, &mut observer)?;
        write_json(&spec.out.join("report.json"), &report)?;
        let name = format!("{:?}", spec.train.mode).to_lowercase();
        println!("{}", accuracy_table(&[(name, report.final_accuracy.clone(), None)]));
        Ok(())
    })?;
    Ok(spec)
}

struct Loaded {
    spec: RunSpec,
    net: MultiExitNetwork<f32>,
    test: Dataset,
    norm: AugmentConfig,
}

fn load_for_eval(args: &EvalArgs) -> CliResult<(Loaded, SettingsFile)> {
    let file = settings_for(&args.run, true)?;
    let run = &args.run;
    let ckpt_path = args
        .checkpoint
        .clone()
        .or_else(|| file.checkpoint.clone())
        .unwrap_or_else(|| run.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into()).join("checkpoints/last.ckpt"));
    let ckpt = Checkpoint::<f32>::load(&ckpt_path)?;
    let file_with_arch = if run.arch.is_none() && file.arch.is_none() {
        SettingsFile { arch: Some(ArchSource::Inline(ckpt.architecture.clone())), ..file.clone() }
    } else {
        file.clone()
    };
    let spec = resolve(run, &file_with_arch)?;
    if spec.arch.digest() != ckpt.architecture.digest() {
        return Err(CliError::invalid(format!(
            "architecture mismatch: spec {} vs checkpoint {} ({})",
            spec.arch.digest(),
            ckpt.architecture.digest(),
            ckpt_path.display()
        )));
    }
    let net = MultiExitNetwork::from_checkpoint(&ckpt)?;
    let (train, test) = load_data(&spec)?;
    let stats = match ckpt.meta.get("normalization") {
        Some(v) if !v.is_null() => serde_json::from_value::<ChannelStats>(v.clone()).map_err(Error::from)?,
        _ => train.channel_stats().clone(),
    };
    let norm = AugmentConfig::identity(&stats);
    Ok((Loaded { spec, net, test, norm }, file))
}

fn policy_of(args: &EvalArgs, file: &SettingsFile, exits: usize) -> CliResult<ExitPolicy> {
    let measure = args.confidence.map(Into::into).or(file.confidence).unwrap_or_default();
    match args.policy.or(file.policy).unwrap_or(PolicyKind::Confidence) {
        PolicyKind::Confidence => {
            let threshold = args.threshold.or(file.threshold).unwrap_or(0.9);
            if !(threshold >= 0.0) {
                return Err(CliError::invalid(format!("threshold must be nonnegative, got {threshold}")));
            }
            Ok(ExitPolicy::ConfidenceThreshold { threshold, measure })
        }
        PolicyKind::Fixed => {
            let exit = args.exit.or(file.exit).ok_or_else(|| CliError::invalid("exit: --policy fixed needs --exit"))?;
            if exit == 0 || exit > exits {
                return Err(CliError::invalid(format!("exit must lie in 1..={exits}, got {exit}")));
            }
            Ok(ExitPolicy::FixedExit { exit })
        }
        PolicyKind::Ensemble => Ok(ExitPolicy::FullEnsemble),
    }
}

/// Runs `eval`; writes `<out>/eval.json`.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let (l, file) = load_for_eval(args)?;
    let policy = policy_of(args, &file, l.net.num_exits())?;
    let measure = match policy {
        ExitPolicy::ConfidenceThreshold { measure, .. } => measure,
        _ => ConfidenceMeasure::MaxProb,
    };
    let report = with_threads(l.spec.threads, || {
        let table = LogitTable::collect(&l.net, &l.test, &l.norm)?;
        let (result, _) = evaluate_policy(&l.net, &l.test, &l.norm, &policy)?;
        let curve = budget_curve(&l.net, &l.test, &l.norm, &BUDGET_THRESHOLDS, measure)?;
        let [_, h, w] = l.test.dims();
        Ok(EvalReport {
            samples: table.len(),
            per_classifier_accuracy: table.accuracies(),
            ensemble_accuracy: table.ensemble_accuracy(),
            exit_macs: l.net.exit_costs(h, w)?,
            policy: Some(result),
            budget_curve: curve,
            exclusivity: None,
            agreement: Vec::new(),
        })
    })?;
    println!(
        "{}",
        accuracy_table(&[("checkpoint".into(), report.per_classifier_accuracy.clone(), Some(report.ensemble_accuracy))])
    );
    if let Some(p) = &report.policy {
        println!(
            "policy {:?}: accuracy {:.2}%, mean MACs {:.0}, exits {:?}\n",
            p.policy,
            100.0 * p.accuracy,
            p.mean_macs,
            p.exit_histogram
        );
    }
    println!("{}", budget_table(&report.budget_curve, *report.exit_macs.last().unwrap_or(&1)));
    fs::create_dir_all(&l.spec.out).map_err(|e| Error::io(&l.spec.out, e))?;
    report.save(l.spec.out.join("eval.json"))?;
    Ok(report)
}

/// Runs `diagnose`; writes `<out>/diagnose.json`.
pub fn cmd_diagnose(args: &EvalArgs) -> CliResult<EvalReport> {
    let (l, _) = load_for_eval(args)?;
    let report = with_threads(l.spec.threads, || {
        let table = LogitTable::collect(&l.net, &l.test, &l.norm)?;
        let preds = table.predictions();
        let (exclusive, first) = exclusive_correct_counts(&preds, &table.labels)?;
        let [_, h, w] = l.test.dims();
        Ok(EvalReport {
            samples: table.len(),
            per_classifier_accuracy: table.accuracies(),
            ensemble_accuracy: table.ensemble_accuracy(),
            exit_macs: l.net.exit_costs(h, w)?,
            policy: None,
            budget_curve: Vec::new(),
            exclusivity: Some(ExclusivityReport::new(exclusive, first)),
            agreement: agreement_matrix(&preds),
        })
    })?;
    let ex = report.exclusivity.as_ref().expect("set above");
    println!(
        "exclusive to classifier 1: {}/{} = {:.4} (denominator: {})\n",
        ex.exclusive, ex.first_correct, ex.fraction, ex.denominator
    );
    println!("{}", agreement_table(&report.agreement));
    let full = *report.exit_macs.last().unwrap_or(&1) as f64;
    for (i, m) in report.exit_macs.iter().enumerate() {
        println!("exit {}: {m} MACs ({:.1}% of full)", i + 1, 100.0 * *m as f64 / full);
    }
    fs::create_dir_all(&l.spec.out).map_err(|e| Error::io(&l.spec.out, e))?;
    report.save(l.spec.out.join("diagnose.json"))?;
    Ok(report)
}

/// Runs `export-logits`; writes `<out>/logits/{logits,labels}.exft`.
pub fn cmd_export_logits(args: &EvalArgs) -> CliResult<PathBuf> {
    let (l, _) = load_for_eval(args)?;
    let dir = l.spec.out.join("logits");
    with_threads(l.spec.threads, || {
        let table = LogitTable::collect(&l.net, &l.test, &l.norm)?;
        export_logits(&table, &dir)?;
        println!("wrote {} samples x {} classifiers to {}", table.len(), table.exits, dir.display());
        Ok(())
    })?;
    Ok(dir)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Diagnose(a) => cmd_diagnose(&a).map(drop),
        Command::ExportLogits(a) => cmd_export_logits(&a).map(drop),
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> u8 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => exit_code::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
