//! The `cdwqc` command line.
//!
//! Every command reads an optional TOML run configuration (`--config`), applies
//! flag overrides and derives all randomness from the configured seed. Exit
//! codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    calibrate_range, CalibrationMetric, CalibrationTarget, CandidateSet, CorpusEntry,
};
use crate::dataset::{
    build_pretrain_corpus, build_tier_corpus, generate_phantoms, mask_paths, memory_loader, render,
    split_by_subject, write_phantom_tree, CorruptionStep, Manifest, ManifestRow, PhantomSpec,
    Provenance, Split, Task,
};
use crate::evaluate::{
    grades_to_tier, recombine_tier, tier_task_labels, weighted_cohen_kappa, EvaluationReport,
    KappaWeighting, SixWayPrediction, TaskReport, Tier, TierTask,
};
use crate::metrics::{
    average_edge_strength, estimate_air_mask, nd_wgm, snr, tenengrad, MetricReport, TissueMasks,
};
use crate::model::{
    cross_validate, finetune, predict_inputs, prepare_input, Checkpoint, EpochLog, ModelConfig,
    ModelError, Network, Sample, TrainConfig,
};
use crate::rng::derive_seed;
use crate::simulate::{
    Artefact, ArtefactParams, GammaConvention, GammaParams, MotionParams, NoiseParams, ParamRange,
    Severity, SeverityPreset, MOTION_POSITIONS,
};
use crate::volume::{load_nifti, save_nifti, Volume3D};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// An invocation the command cannot act on; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PhantomScale {
    /// Raw scanner-like intensities with baseline acquisition noise.
    #[default]
    Scanner,
    /// Tissue intensities in [0, 1] without noise.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub n: usize,
    pub dims: [usize; 3],
    pub scale: PhantomScale,
    pub background_noise: Option<f64>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            n: 20,
            dims: [32; 3],
            scale: PhantomScale::Scanner,
            background_noise: None,
        }
    }
}

impl PhantomSection {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        let base = match self.scale {
            PhantomScale::Scanner => PhantomSpec::scanner_scale(),
            PhantomScale::Unit => PhantomSpec::default(),
        };
        PhantomSpec {
            dims: self.dims,
            background_noise: self.background_noise.unwrap_or(base.background_noise),
            seed,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub folds: usize,
    pub test_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            folds: 5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// 0 disables early stopping.
    pub patience: usize,
    pub class_weights: Option<[f64; 2]>,
    /// How many of the split's folds get a model (the first ones); all when absent.
    pub folds_trained: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            class_weights: None,
            folds_trained: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    pub repetitions: usize,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self { repetitions: 1 }
    }
}

fn unversioned() -> u32 {
    0
}

/// Schema-versioned run configuration; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(default = "unversioned")]
    pub schema_version: u32,
    pub seed: u64,
    pub phantom: PhantomSection,
    pub split: SplitSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub calibrate: CalibrateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            phantom: PhantomSection::default(),
            split: SplitSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            calibrate: CalibrateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| usage(format!("invalid run configuration: {e}")))?;
        if cfg.schema_version == 0 {
            return Err(usage("run configuration must declare schema_version"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(usage(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train_config(0)
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        if self.split.folds == 0 || !(0.0..1.0).contains(&self.split.test_fraction) {
            return Err(usage(
                "split needs at least one fold and a test fraction in [0, 1)",
            ));
        }
        if let Some(k) = self.train.folds_trained {
            if k == 0 || k > self.split.folds {
                return Err(usage(format!(
                    "folds_trained must lie in 1..={}",
                    self.split.folds
                )));
            }
        }
        if self.calibrate.repetitions == 0 {
            return Err(usage("calibrate.repetitions must be at least 1"));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            class_weights: self.train.class_weights,
            folds: self.train.folds_trained.unwrap_or(self.split.folds),
            seed,
        }
    }

    fn corpus_seed(&self) -> u64 {
        derive_seed(self.seed, &[2])
    }

    fn split_seed(&self) -> u64 {
        derive_seed(self.seed, &[1])
    }

    fn train_seed(&self, task: Task) -> u64 {
        derive_seed(self.seed, &[3, task as u64])
    }
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "cdwqc",
    version,
    about = "Artefact simulation and quality control for 3D T1-weighted brain MRI"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "CDWQC_THREADS")]
    pub threads: Option<usize>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom corpus with tissue masks and a manifest.
    Phantom(PhantomArgs),
    /// Corrupt every image of a manifest with one or more presets.
    Corrupt(CorruptArgs),
    /// Compute ND-WGM, SNR, AES and Tenengrad for every image of a manifest.
    Metrics(MetricsArgs),
    /// Select a noise or contrast range against a target metric mean.
    Calibrate(CalibrateArgs),
    /// Build pre-training corpora and train artefact or tier classifiers.
    Pretrain(PretrainArgs),
    /// Retrain the fully connected layers of a checkpoint on a labelled corpus.
    Finetune(FinetuneArgs),
    /// Predict probabilities and labels with one checkpoint.
    Predict(PredictArgs),
    /// Evaluate tier classification, directly or by recombining six artefact models.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// Edge length of the cubic grid.
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long, value_enum)]
    pub scale: Option<PhantomScale>,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `artefact:severity` (e.g. `noise:severe`) or explicit parameters
    /// (e.g. `gamma:beta=0`, `noise:sigma=[5,15]`, `motion:rot=[2,4],trans=[2,4]`).
    #[arg(long = "preset", required = true)]
    pub presets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Root holding the masks (defaults to the manifest directory).
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub source_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub source_root: Option<PathBuf>,
    #[arg(long)]
    pub artefact: Artefact,
    #[arg(long)]
    pub severity: Severity,
    /// Target mean (defaults to the clinical reference for the severity).
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<f64>,
    /// Candidate ranges as `lo,hi;lo,hi;...` (defaults to the published list).
    #[arg(long, allow_hyphen_values = true)]
    pub candidates: Option<String>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Manifest of clean images.
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated tasks, or `artefacts`, `tiers`, `all`.
    #[arg(long, default_value = "artefacts")]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every corpus image as NIfTI.
    #[arg(long)]
    pub materialize: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub folds_trained: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled manifest with split and fold columns.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub source_root: Option<PathBuf>,
    /// Task labels to use (defaults to the checkpoint's task).
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long, default_value_t = 0)]
    pub val_fold: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "image")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub source_root: Option<PathBuf>,
    #[arg(long, required_unless_present = "input")]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Direct,
    Indirect,
}

impl EvalMode {
    fn as_str(self) -> &'static str {
        match self {
            EvalMode::Direct => "direct",
            EvalMode::Indirect => "indirect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitFilter {
    Test,
    Train,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KappaArg {
    Linear,
    Quadratic,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// One tier checkpoint (direct) or the six artefact checkpoints (indirect).
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub source_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitFilter,
    #[arg(long, value_enum, default_value = "linear")]
    pub kappa: KappaArg,
    /// Earlier evaluation reports to compare against with paired tests.
    #[arg(long)]
    pub compare: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Entry points

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|c| c.is::<UsageError>()) {
        return EXIT_USAGE;
    }
    let numeric = err.chain().any(|c| {
        matches!(
            c.downcast_ref::<ModelError>(),
            Some(ModelError::NonFiniteLoss { .. })
        ) || matches!(
            c.downcast_ref::<crate::Error>(),
            Some(crate::Error::Model(ModelError::NonFiniteLoss { .. }))
        )
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("thread count must be at least 1"));
        }
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx {
        cfg,
        overwrite: cli.overwrite,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&ctx, a),
        Command::Corrupt(a) => cmd_corrupt(&ctx, a),
        Command::Metrics(a) => cmd_metrics(&ctx, a),
        Command::Calibrate(a) => cmd_calibrate(&ctx, a),
        Command::Pretrain(a) => cmd_pretrain(ctx, a),
        Command::Finetune(a) => cmd_finetune(ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
    }
}

struct Ctx {
    cfg: RunConfig,
    overwrite: bool,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

// ---------------------------------------------------------------------------
// Output and input helpers

fn check_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            bail!("parent directory {} does not exist", parent.display());
        }
    }
    Ok(())
}

/// Creates `dir`, refusing a non-empty existing directory unless overwriting.
fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    check_parent(dir)?;
    if dir.exists() {
        if !dir.is_dir() {
            bail!("{} exists and is not a directory", dir.display());
        }
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !overwrite {
            return Err(usage(format!(
                "{} is not empty; pass --overwrite to replace its contents",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn prepare_out_file(path: &Path, overwrite: bool) -> Result<()> {
    check_parent(path)?;
    if path.exists() && !overwrite {
        return Err(usage(format!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for entry in log {
        text.push_str(&serde_json::to_string(entry)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let m = Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    if m.is_empty() {
        bail!("manifest {} has no rows", path.display());
    }
    Ok(m)
}

/// Resolves manifest rows to volumes: the file under the manifest directory when
/// present, otherwise a regeneration from provenance with sources under `sources`.
struct Images {
    root: PathBuf,
    sources: PathBuf,
}

impl Images {
    fn new(manifest: &Path, source_root: Option<&Path>) -> Self {
        let root = manifest_root(manifest);
        Self {
            sources: source_root
                .map(Path::to_path_buf)
                .unwrap_or_else(|| root.clone()),
            root,
        }
    }

    fn load(&self, row: &ManifestRow) -> Result<Volume3D> {
        let path = self.root.join(&row.image_path);
        if path.is_file() {
            return Ok(load_nifti(&path)?);
        }
        let sources = self.sources.clone();
        let loader = move |p: &str| Ok(load_nifti(sources.join(p))?);
        render(row, &loader)
            .with_context(|| format!("image {} is neither on disk nor renderable", row.image_path))
    }
}

fn load_masks(root: &Path, row: &ManifestRow) -> Result<Option<TissueMasks>> {
    let paths = mask_paths(Path::new(&row.image_path), &row.subject_id).map(|p| root.join(p));
    if !paths.iter().all(|p| p.is_file()) {
        return Ok(None);
    }
    let [wm, gm, air] = paths.map(load_nifti);
    Ok(Some(TissueMasks::from_volumes(&wm?, &gm?, &air?)?))
}

fn tier_of(row: &ManifestRow) -> Option<Tier> {
    row.tier.or_else(|| row.grades.as_ref().map(grades_to_tier))
}

// ---------------------------------------------------------------------------
// phantom

fn cmd_phantom(ctx: &Ctx, a: PhantomArgs) -> Result<()> {
    let mut section = ctx.cfg.phantom.clone();
    if let Some(n) = a.n {
        section.n = n;
    }
    if let Some(d) = a.dims {
        section.dims = [d; 3];
    }
    if let Some(s) = a.scale {
        section.scale = s;
    }
    if section.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if section.dims.iter().any(|&d| d < 4) {
        return Err(usage("phantom dims must be at least 4"));
    }
    check_parent(&a.out)?;
    let spec = section.spec(ctx.cfg.seed);
    let (images, manifest) = generate_phantoms(&spec, section.n)?;
    prepare_out_dir(&a.out, ctx.overwrite)?;
    write_phantom_tree(&a.out, &images, &manifest)?;
    ctx.note(format!(
        "wrote {} phantoms to {}",
        section.n,
        a.out.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// corrupt

/// A parsed `--preset` argument.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetArg {
    pub preset: Option<SeverityPreset>,
    pub params: ArtefactParams,
    pub tag: String,
}

pub const PRESET_HELP: &str = "motion:moderate, motion:severe, noise:moderate, noise:severe, contrast:moderate, contrast:severe, \
gamma:beta=<v|[lo,hi]>, noise:sigma=<v|[lo,hi]>, motion:rot=<v|[lo,hi]>,trans=<v|[lo,hi]>[,n=<positions>]";

fn parse_range(v: &str) -> Option<ParamRange> {
    let v = v.trim();
    let r = if let Some(inner) = v.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
        let (lo, hi) = inner.split_once(',')?;
        ParamRange(lo.trim().parse().ok()?, hi.trim().parse().ok()?)
    } else {
        ParamRange::fixed(v.parse().ok()?)
    };
    r.is_valid().then_some(r)
}

/// Splits `k=v,k=v` where values may be bracketed ranges containing commas.
fn key_values(s: &str) -> Option<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut start = 0;
    let bytes: Vec<char> = s.chars().collect();
    let mut parts = Vec::new();
    for (i, &c) in bytes.iter().enumerate() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(bytes[start..i].iter().collect::<String>());
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(bytes[start..].iter().collect::<String>());
    for p in parts {
        let (k, v) = p.split_once('=')?;
        out.push((k.trim().to_lowercase(), v.trim().to_owned()));
    }
    Some(out)
}

pub fn parse_preset(s: &str) -> Result<PresetArg, UsageError> {
    let err = || {
        UsageError(format!(
            "unknown preset '{s}'; valid presets: {PRESET_HELP}"
        ))
    };
    let (kind, rest) = s.split_once(':').ok_or_else(err)?;
    let kind = kind.trim().to_lowercase();
    let artefact = match kind.as_str() {
        "gamma" => Artefact::Contrast,
        other => other.parse::<Artefact>().map_err(|_| err())?,
    };
    if let Ok(severity) = rest.trim().parse::<Severity>() {
        let preset = SeverityPreset::new(artefact, severity);
        return Ok(PresetArg {
            preset: Some(preset),
            params: preset.params(0),
            tag: format!("{artefact}-{severity}"),
        });
    }
    let kv = key_values(rest).ok_or_else(err)?;
    let get = |names: &[&str]| {
        kv.iter()
            .find(|(k, _)| names.contains(&k.as_str()))
            .map(|(_, v)| v.as_str())
    };
    if kv.iter().any(|(k, _)| {
        ![
            "beta",
            "β",
            "sigma",
            "σ",
            "rot",
            "rotation",
            "trans",
            "translation",
            "n",
        ]
        .contains(&k.as_str())
    }) {
        return Err(err());
    }
    let params = match artefact {
        Artefact::Contrast => ArtefactParams::Gamma(GammaParams {
            beta_range: parse_range(get(&["beta", "β"]).ok_or_else(err)?).ok_or_else(err)?,
            seed: 0,
            convention: GammaConvention::default(),
        }),
        Artefact::Noise => {
            let sigma_range = parse_range(get(&["sigma", "σ"]).ok_or_else(err)?).ok_or_else(err)?;
            if sigma_range.lo() < 0.0 {
                return Err(err());
            }
            ArtefactParams::Noise(NoiseParams {
                sigma_range,
                seed: 0,
            })
        }
        Artefact::Motion => ArtefactParams::Motion(MotionParams {
            num_positions: match get(&["n"]) {
                Some(v) => v.parse().ok().filter(|&n: &usize| n >= 1).ok_or_else(err)?,
                None => MOTION_POSITIONS,
            },
            rotation_range: parse_range(get(&["rot", "rotation"]).unwrap_or("0"))
                .ok_or_else(err)?,
            translation_range: parse_range(get(&["trans", "translation"]).unwrap_or("0"))
                .ok_or_else(err)?,
            seed: 0,
        }),
    };
    Ok(PresetArg {
        preset: None,
        params,
        tag: format!("{artefact}-custom"),
    })
}

fn strip_nifti_ext(p: &str) -> &str {
    p.strip_suffix(".nii.gz")
        .or_else(|| p.strip_suffix(".nii"))
        .unwrap_or(p)
}

fn cmd_corrupt(ctx: &Ctx, a: CorruptArgs) -> Result<()> {
    let presets: Vec<PresetArg> = a
        .presets
        .iter()
        .map(|p| parse_preset(p))
        .collect::<Result<_, _>>()?;
    check_parent(&a.out)?;
    let input = load_manifest(&a.input)?;
    let images = Images::new(&a.input, None);
    let tag = presets
        .iter()
        .map(|p| p.tag.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let seed = ctx.cfg.seed;
    let rows: Vec<ManifestRow> = input
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut grades = row.grades;
            let steps = presets
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    if let (Some(g), Some(preset)) = (grades.as_mut(), p.preset) {
                        g.set(preset.artefact, preset.severity.grade());
                    }
                    CorruptionStep::from_params(
                        p.preset,
                        p.params.with_seed(derive_seed(seed, &[i as u64, k as u64])),
                    )
                })
                .collect();
            ManifestRow {
                image_path: format!("{}_{tag}.nii", strip_nifti_ext(&row.image_path)),
                subject_id: row.subject_id.clone(),
                grades,
                tier: grades.as_ref().map(grades_to_tier).or(row.tier),
                split: row.split,
                fold: row.fold,
                provenance: Provenance::Corrupted {
                    source: row.image_path.clone(),
                    steps,
                },
            }
        })
        .collect();
    let out = Manifest { rows };
    // render everything before the first write
    let rendered: Vec<Volume3D> = input
        .rows
        .par_iter()
        .zip(&out.rows)
        .map(|(src, row)| -> Result<Volume3D> {
            let mut vol = images.load(src)?;
            if let Provenance::Corrupted { steps, .. } = &row.provenance {
                for s in steps {
                    vol = s.params.apply(&vol).0;
                }
            }
            Ok(vol)
        })
        .collect::<Result<_>>()?;
    prepare_out_dir(&a.out, ctx.overwrite)?;
    out.rows
        .par_iter()
        .zip(&rendered)
        .try_for_each(|(row, vol)| -> Result<()> {
            let path = a.out.join(&row.image_path);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            save_nifti(vol, &path)?;
            Ok(())
        })?;
    out.save(&a.out.join("manifest.tsv"))?;
    ctx.note(format!(
        "wrote {} corrupted images to {}",
        out.len(),
        a.out.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics

fn group_label(row: &ManifestRow) -> String {
    tier_of(row)
        .map(|t| format!("tier{}", t.value()))
        .unwrap_or_else(|| "ungraded".into())
}

fn cmd_metrics(ctx: &Ctx, a: MetricsArgs) -> Result<()> {
    let manifest = load_manifest(&a.input)?;
    let images = Images::new(&a.input, a.source_root.as_deref());
    let mask_root = a.masks.clone().unwrap_or_else(|| manifest_root(&a.input));
    let per_image: Vec<Vec<(&'static str, f64)>> = manifest
        .rows
        .par_iter()
        .map(|row| -> Result<Vec<(&'static str, f64)>> {
            let vol = images.load(row)?;
            let id = &row.image_path;
            let mut values = Vec::new();
            let masks = load_masks(&mask_root, row)?;
            if let Some(m) = &masks {
                values.push((
                    "nd_wgm",
                    nd_wgm(&vol, m).with_context(|| format!("ND-WGM of {id}"))?,
                ));
                values.push(("snr", snr(&vol, m).with_context(|| format!("SNR of {id}"))?));
            }
            values.push((
                "aes",
                average_edge_strength(&vol).with_context(|| format!("AES of {id}"))?,
            ));
            values.push(("tenengrad", tenengrad(&vol)));
            if masks.is_none() {
                let air = estimate_air_mask(&vol);
                values.push(("air_voxels", air.air.iter().filter(|&&v| v).count() as f64));
            }
            Ok(values)
        })
        .collect::<Result<_>>()?;
    let mut report = MetricReport::default();
    for (row, values) in manifest.rows.iter().zip(per_image) {
        report
            .groups
            .insert(row.image_path.clone(), group_label(row));
        for (metric, v) in values {
            report.push(&row.image_path, metric, v);
        }
    }
    prepare_out_dir(&a.out, ctx.overwrite)?;
    let mut tsv = Vec::new();
    report.write_tsv(&mut tsv)?;
    fs::write(a.out.join("metrics.tsv"), tsv)?;
    write_json(&a.out.join("summary.json"), &report.summary_json())?;
    ctx.note(format!(
        "wrote metrics for {} images to {}",
        manifest.len(),
        a.out.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate

fn parse_candidates(artefact: Artefact, s: &str) -> Result<CandidateSet> {
    let ranges = s
        .split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let p = p.trim().trim_start_matches('[').trim_end_matches(']');
            parse_range(&format!("[{p}]")).ok_or_else(|| {
                usage(format!(
                    "cannot parse candidate range '{p}' (expected lo,hi)"
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CandidateSet::new(artefact, ranges).map_err(|e| usage(e.to_string()))
}

fn cmd_calibrate(ctx: &Ctx, a: CalibrateArgs) -> Result<()> {
    let metric = CalibrationMetric::for_artefact(a.artefact).ok_or_else(|| {
        usage(format!(
            "{} cannot be calibrated; choose noise or contrast",
            a.artefact
        ))
    })?;
    let candidates = match &a.candidates {
        Some(s) => parse_candidates(a.artefact, s)?,
        None if a.artefact == Artefact::Noise => CandidateSet::noise(),
        None => CandidateSet::contrast(),
    };
    let target = match a.target {
        Some(t) => CalibrationTarget {
            metric,
            target_mean: t,
            severity: a.severity,
        },
        None => CalibrationTarget::clinical(metric, a.severity),
    };
    target.validate().map_err(|e| usage(e.to_string()))?;
    let repetitions = a.repetitions.unwrap_or(ctx.cfg.calibrate.repetitions);
    if repetitions == 0 {
        return Err(usage("--repetitions must be at least 1"));
    }
    check_parent(&a.out)?;
    let manifest = load_manifest(&a.input)?;
    let images = Images::new(&a.input, a.source_root.as_deref());
    let mask_root = a.masks.clone().unwrap_or_else(|| manifest_root(&a.input));
    let corpus: Vec<CorpusEntry> = manifest
        .rows
        .par_iter()
        .map(|row| -> Result<CorpusEntry> {
            let masks = load_masks(&mask_root, row)?
                .ok_or_else(|| anyhow!("no tissue masks found for image {}", row.image_path))?;
            Ok(CorpusEntry {
                id: row.image_path.clone(),
                volume: images.load(row)?,
                masks,
            })
        })
        .collect::<Result<_>>()?;
    let result = calibrate_range(&corpus, &candidates, &target, ctx.cfg.seed, repetitions)?;
    prepare_out_dir(&a.out, ctx.overwrite)?;
    let mut tsv = Vec::new();
    result.write_tsv(&mut tsv)?;
    fs::write(a.out.join("calibration.tsv"), tsv)?;
    write_json(&a.out.join("calibration.json"), &result)?;
    ctx.note(format!(
        "chosen {} range {} (mean closest to {})",
        a.artefact, result.chosen, target.target_mean
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain

pub fn parse_tasks(s: &str) -> Result<Vec<Task>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "artefacts" => out.extend(Task::ARTEFACT_TASKS),
            "tiers" => out.extend(Task::TIER_TASKS),
            "all" => out.extend(Task::ARTEFACT_TASKS.into_iter().chain(Task::TIER_TASKS)),
            name => out.push(name.parse::<Task>().map_err(usage)?),
        }
    }
    if out.is_empty() {
        return Err(usage("no task given"));
    }
    let mut seen = Vec::new();
    out.retain(|t| {
        let fresh = !seen.contains(t);
        seen.push(*t);
        fresh
    });
    Ok(out)
}

/// Rendered, prepared samples of `rows` with their task labels.
fn prepare_samples(
    rows: &[&ManifestRow],
    task: Task,
    model: &ModelConfig,
    load: &(dyn Fn(&ManifestRow) -> Result<Volume3D> + Sync),
) -> Result<Vec<Sample>> {
    rows.par_iter()
        .map(|row| -> Result<Sample> {
            let label = row
                .label(task)
                .ok_or_else(|| anyhow!("image {} has no {task} label", row.image_path))?;
            let vol = load(row)?;
            let input = prepare_input(&vol, model)
                .with_context(|| format!("preparing {}", row.image_path))?;
            Ok(Sample { input, label })
        })
        .collect()
}

fn test_report(net: &Network<f32>, task: Task, test: &[Sample]) -> Result<Option<TaskReport>> {
    if test.is_empty() {
        return Ok(None);
    }
    let inputs: Vec<&[f32]> = test.iter().map(|s| &s.input[..]).collect();
    let preds: Vec<bool> = predict_inputs(net, &inputs)?
        .iter()
        .map(|p| p.label)
        .collect();
    let labels: Vec<bool> = test.iter().map(|s| s.label).collect();
    Ok(Some(TaskReport::new(task.name(), &preds, &labels)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldSummary {
    fold: usize,
    best_epoch: usize,
    best_val_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CvSummary {
    task: String,
    final_fold: usize,
    folds: Vec<FoldSummary>,
}

fn cmd_pretrain(mut ctx: Ctx, a: PretrainArgs) -> Result<()> {
    let tasks = parse_tasks(&a.task)?;
    if let Some(e) = a.epochs {
        ctx.cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        ctx.cfg.train.learning_rate = lr;
    }
    if a.folds_trained.is_some() {
        ctx.cfg.train.folds_trained = a.folds_trained;
    }
    ctx.cfg.validate()?;
    check_parent(&a.out)?;
    let clean = load_manifest(&a.input)?;
    let images = Images::new(&a.input, None);
    let volumes: Vec<Volume3D> = clean
        .rows
        .par_iter()
        .map(|r| images.load(r))
        .collect::<Result<_>>()?;
    let by_path: HashMap<String, Volume3D> = clean
        .rows
        .iter()
        .map(|r| r.image_path.clone())
        .zip(volumes)
        .collect();
    let loader = memory_loader(&by_path);
    let load = |row: &ManifestRow| -> Result<Volume3D> { Ok(render(row, &loader)?) };
    prepare_out_dir(&a.out, ctx.overwrite)?;

    let cfg = &ctx.cfg;
    let split = |m: Manifest| {
        split_by_subject(
            &m,
            cfg.split.folds,
            cfg.split.test_fraction,
            cfg.split_seed(),
        )
    };
    let mut tier_corpus: Option<Manifest> = None;
    let mut reports = Vec::new();
    for task in tasks {
        let (corpus_name, corpus) = if task.artefact().is_some() {
            (
                task.name(),
                split(build_pretrain_corpus(&clean, task, cfg.corpus_seed())?)?,
            )
        } else {
            if tier_corpus.is_none() {
                tier_corpus = Some(split(build_tier_corpus(&clean, cfg.corpus_seed())?)?);
            }
            ("tiers", tier_corpus.clone().expect("built above"))
        };
        let manifest_path = a.out.join(format!("{corpus_name}.tsv"));
        if !manifest_path.exists() || task.artefact().is_some() {
            corpus.save(&manifest_path)?;
            if a.materialize {
                corpus.rows.par_iter().try_for_each(|row| -> Result<()> {
                    let path = a.out.join(&row.image_path);
                    if let Some(dir) = path.parent() {
                        fs::create_dir_all(dir)?;
                    }
                    save_nifti(&load(row)?, &path)?;
                    Ok(())
                })?;
            }
        }
        let labelled: Vec<&ManifestRow> = corpus
            .rows
            .iter()
            .filter(|r| r.label(task).is_some())
            .collect();
        let train_rows: Vec<&ManifestRow> = labelled
            .iter()
            .copied()
            .filter(|r| r.split == Some(Split::Train))
            .collect();
        let test_rows: Vec<&ManifestRow> = labelled
            .iter()
            .copied()
            .filter(|r| r.split == Some(Split::Test))
            .collect();
        let folds: Vec<usize> = train_rows
            .iter()
            .map(|r| r.fold.expect("split assigns folds to training rows"))
            .collect();
        ctx.note(format!(
            "{task}: {} training and {} test images",
            train_rows.len(),
            test_rows.len()
        ));
        let samples = prepare_samples(&train_rows, task, &cfg.model, &load)?;
        let train_cfg = cfg.train_config(cfg.train_seed(task));
        let cv = cross_validate(&samples, &folds, &cfg.model, &train_cfg, Some(task.name()))?;
        drop(samples);

        let dir = a.out.join(task.name());
        fs::create_dir_all(&dir)?;
        for (k, (ckpt, log)) in cv.checkpoints.iter().zip(&cv.logs).enumerate() {
            ckpt.save(&dir.join(format!("fold{k}.ckpt")))?;
            write_log(&dir.join(format!("fold{k}.log.jsonl")), log)?;
        }
        let final_ckpt = cv.final_checkpoint();
        final_ckpt.save(&dir.join("final.ckpt"))?;
        write_json(
            &dir.join("cv.json"),
            &CvSummary {
                task: task.name().into(),
                final_fold: cv.final_fold,
                folds: cv
                    .checkpoints
                    .iter()
                    .enumerate()
                    .map(|(fold, c)| FoldSummary {
                        fold,
                        best_epoch: c.meta.epoch,
                        best_val_loss: c.meta.best_val_loss,
                    })
                    .collect(),
            },
        )?;
        let test = prepare_samples(&test_rows, task, &cfg.model, &load)?;
        if let Some(r) = test_report(&final_ckpt.network()?, task, &test)? {
            ctx.note(format!(
                "{task}: test balanced accuracy {}",
                r.balanced_accuracy
                    .map(|b| format!("{b:.4}"))
                    .unwrap_or_else(|| "undefined".into())
            ));
            write_json(&dir.join("test_report.json"), &r)?;
            reports.push(r);
        }
    }
    let report = EvaluationReport {
        mode: "pretrain".into(),
        tasks: reports,
        kappa: None,
        comparisons: Vec::new(),
    };
    write_json(&a.out.join("pretrain_report.json"), &report)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune

fn checkpoint_task(ckpt: &Checkpoint, path: &Path) -> Result<Task> {
    let name = ckpt.meta.task.as_deref().ok_or_else(|| {
        usage(format!(
            "checkpoint {} records no task; pass --task",
            path.display()
        ))
    })?;
    name.parse::<Task>().map_err(usage)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_finetune(mut ctx: Ctx, a: FinetuneArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        ctx.cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        ctx.cfg.train.learning_rate = lr;
    }
    ctx.cfg.validate()?;
    let pretrained = load_checkpoint(&a.checkpoint)?;
    let task = match a.task {
        Some(t) => t,
        None => checkpoint_task(&pretrained, &a.checkpoint)?,
    };
    check_parent(&a.out)?;
    let manifest = load_manifest(&a.input)?;
    let images = Images::new(&a.input, a.source_root.as_deref());
    let rows: Vec<&ManifestRow> = manifest
        .rows
        .iter()
        .filter(|r| r.split == Some(Split::Train) && r.label(task).is_some())
        .collect();
    if rows.iter().any(|r| r.fold.is_none()) || rows.is_empty() {
        bail!("fine-tuning needs labelled training rows with fold assignments");
    }
    let (val_rows, train_rows): (Vec<&ManifestRow>, Vec<&ManifestRow>) =
        rows.into_iter().partition(|r| r.fold == Some(a.val_fold));
    if val_rows.is_empty() {
        return Err(ModelError::MissingFold(a.val_fold).into());
    }
    let load = |row: &ManifestRow| images.load(row);
    let model = &pretrained.config;
    let train = prepare_samples(&train_rows, task, model, &load)?;
    let val = prepare_samples(&val_rows, task, model, &load)?;
    let train_cfg = ctx
        .cfg
        .train_config(derive_seed(ctx.cfg.train_seed(task), &[4]));
    let train_refs: Vec<&Sample> = train.iter().collect();
    let val_refs: Vec<&Sample> = val.iter().collect();
    let (mut tuned, log) = finetune(&pretrained, &train_refs, &val_refs, &train_cfg)?;
    tuned.meta.task = Some(task.name().into());
    tuned.meta.fold = Some(a.val_fold);
    prepare_out_dir(&a.out, ctx.overwrite)?;
    let dir = a.out.join(task.name());
    fs::create_dir_all(&dir)?;
    tuned.save(&dir.join("final.ckpt"))?;
    write_log(&dir.join("finetune.log.jsonl"), &log)?;
    ctx.note(format!(
        "{task}: fine-tuned, best epoch {} (validation loss {:.5})",
        tuned.meta.epoch, tuned.meta.best_val_loss
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

fn prepare_for(vol: &Volume3D, model: &ModelConfig, id: &str) -> Result<Vec<f32>> {
    prepare_input(vol, model).map_err(|e| match e {
        ModelError::ShapeMismatch { expected, got } => anyhow!(
            "image {id} has dims {got} but the checkpoint expects {expected} (input policy {:?})",
            model.input_policy
        ),
        other => other.into(),
    })
}

fn cmd_predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let net = ckpt.network()?;
    prepare_out_file(&a.out, ctx.overwrite)?;
    let items: Vec<(String, Vec<f32>)> = match &a.input {
        Some(path) => {
            let manifest = load_manifest(path)?;
            let images = Images::new(path, a.source_root.as_deref());
            manifest
                .rows
                .par_iter()
                .map(|r| {
                    Ok((
                        r.image_path.clone(),
                        prepare_for(&images.load(r)?, &ckpt.config, &r.image_path)?,
                    ))
                })
                .collect::<Result<_>>()?
        }
        None => a
            .image
            .par_iter()
            .map(|p| {
                let id = p.display().to_string();
                Ok((id.clone(), prepare_for(&load_nifti(p)?, &ckpt.config, &id)?))
            })
            .collect::<Result<_>>()?,
    };
    let inputs: Vec<&[f32]> = items.iter().map(|(_, x)| &x[..]).collect();
    let preds = predict_inputs(&net, &inputs)?;
    let mut text = String::from("image_path\tprobability\tlabel\n");
    for ((id, _), p) in items.iter().zip(&preds) {
        text.push_str(&format!("{id}\t{}\t{}\n", p.probability, u8::from(p.label)));
    }
    write_text(&a.out, &text)?;
    ctx.note(format!(
        "wrote {} predictions to {}",
        preds.len(),
        a.out.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

/// Per-image evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_path: String,
    pub reference_tier: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_tier: Option<u8>,
    pub probabilities: BTreeMap<String, f64>,
    /// Whether the prediction was right, per task that includes this image.
    pub correct: BTreeMap<String, bool>,
}

/// Evaluation report plus the per-image records used for paired comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    #[serde(flatten)]
    pub report: EvaluationReport,
    pub images: Vec<ImageOutcome>,
}

fn tier_task_of(task: Task) -> Option<TierTask> {
    match task {
        Task::Tier1vs2 => Some(TierTask::Tier1vs2),
        Task::Tier12vs3 => Some(TierTask::Tier12vs3),
        _ => None,
    }
}

fn six_way(flags: &BTreeMap<Task, bool>) -> SixWayPrediction {
    SixWayPrediction {
        motion_severe: flags[&Task::Motion01vs2],
        motion_moderate: flags[&Task::Motion0vs1],
        contrast_severe: flags[&Task::Contrast01vs2],
        contrast_moderate: flags[&Task::Contrast0vs1],
        noise_0vs12: flags[&Task::Noise0vs12],
        noise_0vs1: flags[&Task::Noise0vs1],
    }
}

/// Paired per-image correctness of two reports on the images they share.
fn paired_correctness(
    a: &EvaluationOutput,
    b: &EvaluationOutput,
    task: &str,
) -> (Vec<f64>, Vec<f64>) {
    let index: BTreeMap<&str, &ImageOutcome> = b
        .images
        .iter()
        .map(|i| (i.image_path.as_str(), i))
        .collect();
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    let mut rows: Vec<&ImageOutcome> = a.images.iter().collect();
    rows.sort_by(|p, q| p.image_path.cmp(&q.image_path));
    for img in rows {
        if let (Some(&ca), Some(&cb)) = (
            img.correct.get(task),
            index
                .get(img.image_path.as_str())
                .and_then(|o| o.correct.get(task)),
        ) {
            xa.push(f64::from(u8::from(ca)));
            xb.push(f64::from(u8::from(cb)));
        }
    }
    (xa, xb)
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let ckpts: Vec<(Task, Checkpoint)> = a
        .checkpoints
        .iter()
        .map(|p| {
            let c = load_checkpoint(p)?;
            Ok((checkpoint_task(&c, p)?, c))
        })
        .collect::<Result<_>>()?;
    match a.mode {
        EvalMode::Direct => {
            if ckpts.len() != 1 || tier_task_of(ckpts[0].0).is_none() {
                return Err(usage("direct mode takes exactly one tier-task checkpoint"));
            }
        }
        EvalMode::Indirect => {
            let mut tasks: Vec<Task> = ckpts.iter().map(|(t, _)| *t).collect();
            tasks.sort();
            let mut expected = Task::ARTEFACT_TASKS.to_vec();
            expected.sort();
            if tasks != expected {
                return Err(usage(format!(
                    "indirect mode takes six checkpoints, one per artefact task ({}); got {}",
                    Task::ARTEFACT_TASKS.map(|t| t.name()).join(", "),
                    tasks
                        .iter()
                        .map(|t| t.name())
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
        }
    }
    let others: Vec<EvaluationOutput> = a
        .compare
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing evaluation report {}", p.display()))
        })
        .collect::<Result<_>>()?;
    prepare_out_file(&a.out, ctx.overwrite)?;

    let manifest = load_manifest(&a.input)?;
    let images = Images::new(&a.input, a.source_root.as_deref());
    let rows: Vec<&ManifestRow> = manifest
        .rows
        .iter()
        .filter(|r| match a.split {
            SplitFilter::All => true,
            SplitFilter::Test => r.split == Some(Split::Test),
            SplitFilter::Train => r.split == Some(Split::Train),
        })
        .collect();
    if rows.is_empty() {
        bail!(
            "no rows of {} fall in the requested split",
            a.input.display()
        );
    }
    let reference: Vec<Tier> = rows
        .iter()
        .map(|r| tier_of(r).ok_or_else(|| anyhow!("image {} has no grades or tier", r.image_path)))
        .collect::<Result<_>>()?;
    let volumes: Vec<Volume3D> = rows
        .par_iter()
        .map(|r| images.load(r))
        .collect::<Result<_>>()?;

    let mut probabilities: Vec<BTreeMap<Task, f64>> = vec![BTreeMap::new(); rows.len()];
    let mut flags: Vec<BTreeMap<Task, bool>> = vec![BTreeMap::new(); rows.len()];
    for (task, ckpt) in &ckpts {
        let net = ckpt.network()?;
        let inputs: Vec<Vec<f32>> = volumes
            .par_iter()
            .zip(&rows)
            .map(|(v, r)| prepare_for(v, &ckpt.config, &r.image_path))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f32]> = inputs.iter().map(|x| &x[..]).collect();
        for (i, p) in predict_inputs(&net, &refs)?.into_iter().enumerate() {
            probabilities[i].insert(*task, p.probability);
            flags[i].insert(*task, p.label);
        }
    }

    let mut outcomes: Vec<ImageOutcome> = rows
        .iter()
        .zip(&reference)
        .zip(&probabilities)
        .map(|((r, t), probs)| ImageOutcome {
            image_path: r.image_path.clone(),
            reference_tier: t.value(),
            predicted_tier: None,
            probabilities: probs
                .iter()
                .map(|(k, v)| (k.name().to_owned(), *v))
                .collect(),
            correct: BTreeMap::new(),
        })
        .collect();
    let mut tasks = Vec::new();
    let mut kappa = None;
    match a.mode {
        EvalMode::Direct => {
            let task = ckpts[0].0;
            let (mut pred, mut refl) = (Vec::new(), Vec::new());
            for (i, r) in rows.iter().enumerate() {
                if let Some(label) = r.label(task) {
                    let p = flags[i][&task];
                    pred.push(p);
                    refl.push(label);
                    outcomes[i].correct.insert(task.name().into(), p == label);
                }
            }
            tasks.push(TaskReport::new(task.name(), &pred, &refl)?);
        }
        EvalMode::Indirect => {
            let predicted: Vec<Tier> = flags.iter().map(|f| recombine_tier(&six_way(f))).collect();
            for (o, t) in outcomes.iter_mut().zip(&predicted) {
                o.predicted_tier = Some(t.value());
            }
            for tt in [TierTask::Tier1vs2, TierTask::Tier12vs3] {
                let (p, r) = tier_task_labels(&predicted, &reference, tt)?;
                tasks.push(TaskReport::new(tt.name(), &p, &r)?);
                for (i, (pt, rt)) in predicted.iter().zip(&reference).enumerate() {
                    let (pp, rr) = tier_task_labels(&[*pt], &[*rt], tt)?;
                    if let (Some(x), Some(y)) = (pp.first(), rr.first()) {
                        outcomes[i].correct.insert(tt.name().into(), x == y);
                    }
                }
            }
            for task in Task::ARTEFACT_TASKS {
                let (mut pred, mut refl) = (Vec::new(), Vec::new());
                for (i, r) in rows.iter().enumerate() {
                    if let Some(label) = r.label(task) {
                        pred.push(flags[i][&task]);
                        refl.push(label);
                        outcomes[i]
                            .correct
                            .insert(task.name().into(), flags[i][&task] == label);
                    }
                }
                if !pred.is_empty() {
                    tasks.push(TaskReport::new(task.name(), &pred, &refl)?);
                }
            }
            let weighting = match a.kappa {
                KappaArg::Linear => KappaWeighting::Linear,
                KappaArg::Quadratic => KappaWeighting::Quadratic,
            };
            let p: Vec<u8> = predicted.iter().map(|t| t.value() - 1).collect();
            let r: Vec<u8> = reference.iter().map(|t| t.value() - 1).collect();
            kappa = Some(weighted_cohen_kappa(&p, &r, weighting)?);
        }
    }
    let mut output = EvaluationOutput {
        report: EvaluationReport {
            mode: a.mode.as_str().into(),
            tasks,
            kappa,
            comparisons: Vec::new(),
        },
        images: outcomes,
    };
    let mut named = Vec::new();
    for other in &others {
        for t in [TierTask::Tier1vs2, TierTask::Tier12vs3] {
            let (xa, xb) = paired_correctness(&output, other, t.name());
            if !xa.is_empty() {
                named.push((
                    format!(
                        "{}: {} vs {}",
                        t.name(),
                        output.report.mode,
                        other.report.mode
                    ),
                    xa,
                    xb,
                ));
            }
        }
    }
    output.report.add_comparisons(&named)?;
    write_json(&a.out, &output)?;
    for t in &output.report.tasks {
        ctx.note(format!(
            "{}: n={} balanced accuracy {}",
            t.task,
            t.n,
            t.balanced_accuracy
                .map(|b| format!("{b:.4}"))
                .unwrap_or_else(|| "undefined".into())
        ));
    }
    Ok(())
}
